#include "patchsim/collectives.hpp"
#include "patchsim/rng.hpp"

#include <chrono>
#include <stdexcept>
#include <thread>

namespace patchsim {

namespace {

constexpr uint64_t kStatEntryBytes = 2 * sizeof(double);  // mean + mean_sq

uint64_t tensor_bytes(const Tensor& t) { return uint64_t(t.size()) * sizeof(float); }

CommPrimitive tag_primitive(uint64_t tag) { return CommPrimitive(tag & 0xF); }

}  // namespace

const char* raw_kind_name(RawKind k) {
    switch (k) {
        case RawKind::Compute: return "Compute";
        case RawKind::Post: return "Post";
        case RawKind::Wait: return "Wait";
    }
    return "?";
}

const char* comm_primitive_name(CommPrimitive p) {
    switch (p) {
        case CommPrimitive::AllGather: return "AllGather";
        case CommPrimitive::Halo: return "Halo";
        case CommPrimitive::StatReduce: return "StatReduce";
    }
    return "?";
}

CollectiveHub::CollectiveHub(int n_devices, bool stress, uint64_t stress_seed)
    : n_(n_devices), stress_(stress), failed_(n_devices, 0), waiting_on_(n_devices, 0) {
    if (n_ < 1) throw std::invalid_argument("CollectiveHub: need at least one device");
    for (int d = 0; d < n_; ++d)
        stress_states_.push_back(substream_seed(stress_seed, uint64_t(d), 0xC0FFEE));
}

void CollectiveHub::maybe_stress(int device) {
    if (!stress_) return;
    // Perturb real scheduling only; results must not care.
    SplitMix64 rng(stress_states_[device]);
    stress_states_[device] = rng.next();
    const uint64_t r = stress_states_[device] % 3;
    if (r == 0) {
        std::this_thread::yield();
    } else if (r == 1) {
        std::this_thread::sleep_for(std::chrono::microseconds(stress_states_[device] % 200));
    }
}

void CollectiveHub::account_locked(CommPrimitive prim, uint64_t recv, uint64_t sent) {
    volumes_.add(prim, recv, sent);
}

void CollectiveHub::post(int device, uint64_t tag, Tensor patch, int row_start) {
    maybe_stress(device);
    std::lock_guard<std::mutex> lk(mu_);
    GatherSlot& slot = gathers_[tag];
    if (slot.patches.count(device))
        throw std::runtime_error("collective: device posted the same tag twice");
    // Bytes are booked when the transfer is initiated; with equal bands the
    // (N-1)/N receive share equals own * (N-1).
    if (n_ > 1)
        account_locked(CommPrimitive::AllGather, tensor_bytes(patch) * (n_ - 1),
                       tensor_bytes(patch) * (n_ - 1));
    slot.patches.emplace(device, std::make_pair(std::move(patch), row_start));
    cv_.notify_all();
}

std::shared_ptr<const Tensor> CollectiveHub::wait_full(int device, uint64_t tag, bool* stalled) {
    maybe_stress(device);
    std::unique_lock<std::mutex> lk(mu_);
    auto complete = [&] {
        auto it = gathers_.find(tag);
        return it != gathers_.end() && int(it->second.patches.size()) == n_;
    };
    if (stalled) *stalled = !complete();
    if (!complete()) {
        waiting_on_[device] = tag;
        ++n_waiting_;
        check_stuck_locked();
        cv_.wait(lk, [&] { return aborted_ || complete(); });
        --n_waiting_;
        waiting_on_[device] = 0;
        if (aborted_)
            throw std::runtime_error("collective deadlock: devices wait on mismatched tags");
    }
    GatherSlot& slot = gathers_[tag];
    if (!slot.assembled) {
        // Assemble rows in device order; every participant sees the same copy.
        int full_h = 0;
        const auto& first = slot.patches.begin()->second.first;
        for (const auto& [d, p] : slot.patches) full_h += p.first.h;
        Tensor full(first.n, first.c, full_h, first.w);
        for (const auto& [d, p] : slot.patches) {
            const Tensor& t = p.first;
            for (int in = 0; in < t.n; ++in)
                for (int ic = 0; ic < t.c; ++ic)
                    for (int iy = 0; iy < t.h; ++iy)
                        for (int ix = 0; ix < t.w; ++ix)
                            full.at(in, ic, p.second + iy, ix) = t.at(in, ic, iy, ix);
        }
        slot.assembled = std::make_shared<const Tensor>(std::move(full));
    }
    auto out = slot.assembled;
    if (++slot.consumed == n_) gathers_.erase(tag);
    return out;
}

void CollectiveHub::post_stats(int device, uint64_t tag, GnStats stats, double weight) {
    maybe_stress(device);
    std::lock_guard<std::mutex> lk(mu_);
    StatSlot& slot = stat_slots_[tag];
    if (slot.stats.count(device))
        throw std::runtime_error("collective: device posted the same stat tag twice");
    if (n_ > 1)
        account_locked(CommPrimitive::StatReduce,
                       uint64_t(stats.entries()) * kStatEntryBytes * (n_ - 1),
                       uint64_t(stats.entries()) * kStatEntryBytes * (n_ - 1));
    slot.stats.emplace(device, std::make_pair(std::move(stats), weight));
    cv_.notify_all();
}

GnStats CollectiveHub::wait_stats(int device, uint64_t tag, bool* stalled) {
    maybe_stress(device);
    std::unique_lock<std::mutex> lk(mu_);
    auto complete = [&] {
        auto it = stat_slots_.find(tag);
        return it != stat_slots_.end() && int(it->second.stats.size()) == n_;
    };
    if (stalled) *stalled = !complete();
    if (!complete()) {
        waiting_on_[device] = tag;
        ++n_waiting_;
        check_stuck_locked();
        cv_.wait(lk, [&] { return aborted_ || complete(); });
        --n_waiting_;
        waiting_on_[device] = 0;
        if (aborted_)
            throw std::runtime_error("collective deadlock: devices wait on mismatched tags");
    }
    StatSlot& slot = stat_slots_[tag];
    if (!slot.combined_ready) {
        if (n_ == 1) {
            // Degenerate reduction returns the local stats untouched.
            slot.combined = slot.stats.begin()->second.first;
        } else {
            const GnStats& first = slot.stats.begin()->second.first;
            GnStats combined(first.samples, first.groups);
            double total_weight = 0.0;
            for (const auto& [d, sw] : slot.stats) {
                if (!sw.first.same_shape(first))
                    throw std::runtime_error("stat reduce: group-count mismatch across devices");
                total_weight += sw.second;
            }
            for (std::size_t e = 0; e < combined.entries(); ++e) {
                double m = 0.0, msq = 0.0;
                for (const auto& [d, sw] : slot.stats) {
                    m += sw.second * sw.first.mean[e];
                    msq += sw.second * sw.first.mean_sq[e];
                }
                combined.mean[e] = m / total_weight;
                combined.mean_sq[e] = msq / total_weight;
            }
            slot.combined = std::move(combined);
        }
        slot.combined_ready = true;
    }
    GnStats out = slot.combined;
    if (++slot.consumed == n_) stat_slots_.erase(tag);
    return out;
}

std::pair<Tensor, Tensor> CollectiveHub::halo_exchange(int device, uint64_t tag,
                                                       const Tensor& fresh, int halo_rows) {
    if (halo_rows < 1) throw std::invalid_argument("halo_exchange: halo_rows must be >= 1");
    if (fresh.h < halo_rows)
        throw std::invalid_argument("halo_exchange: patch has fewer rows than the halo");
    maybe_stress(device);
    std::unique_lock<std::mutex> lk(mu_);
    HaloSlot& slot = halo_slots_[tag];
    slot.halo_rows = halo_rows;
    slot.fresh.emplace(device, fresh);
    {
        uint64_t strips = 0;
        const uint64_t strip = uint64_t(fresh.n) * fresh.c * halo_rows * fresh.w * sizeof(float);
        if (device > 0) strips += strip;
        if (device < n_ - 1) strips += strip;
        account_locked(CommPrimitive::Halo, strips, strips);
    }
    cv_.notify_all();

    auto neighbours_ready = [&] {
        auto it = halo_slots_.find(tag);
        if (it == halo_slots_.end()) return false;
        const HaloSlot& s = it->second;
        if (device > 0 && !s.fresh.count(device - 1)) return false;
        if (device < n_ - 1 && !s.fresh.count(device + 1)) return false;
        return true;
    };
    if (!neighbours_ready()) {
        waiting_on_[device] = tag;
        ++n_waiting_;
        check_stuck_locked();
        cv_.wait(lk, [&] { return aborted_ || neighbours_ready(); });
        --n_waiting_;
        waiting_on_[device] = 0;
        if (aborted_)
            throw std::runtime_error("collective deadlock: devices wait on mismatched tags");
    }
    const HaloSlot& s = halo_slots_.at(tag);
    Tensor top(fresh.n, fresh.c, halo_rows, fresh.w);
    Tensor bottom(fresh.n, fresh.c, halo_rows, fresh.w);
    if (device > 0) {
        const Tensor& above = s.fresh.at(device - 1);
        top = above.slice_rows(above.h - halo_rows, above.h);
    }
    if (device < n_ - 1) {
        const Tensor& below = s.fresh.at(device + 1);
        bottom = below.slice_rows(0, halo_rows);
    }
    HaloSlot& ms = halo_slots_.at(tag);
    if (++ms.consumed == n_) halo_slots_.erase(tag);
    return {std::move(top), std::move(bottom)};
}

void CollectiveHub::mark_failed(int device) {
    std::lock_guard<std::mutex> lk(mu_);
    failed_[device] = 1;
    aborted_ = true;  // any further blocking wait is unsatisfiable
    cv_.notify_all();
}

CommVolumes CollectiveHub::volumes() const {
    std::lock_guard<std::mutex> lk(mu_);
    return volumes_;
}

void CollectiveHub::check_stuck_locked() {
    int live = 0;
    for (int d = 0; d < n_; ++d)
        if (!failed_[d]) ++live;
    if (live == 0 || n_waiting_ < live) return;
    // Every live device is blocked; progress is possible only if some awaited
    // tag is already complete (its waiters are about to wake).
    for (int d = 0; d < n_; ++d) {
        const uint64_t tag = waiting_on_[d];
        if (tag == 0) continue;
        switch (tag_primitive(tag)) {
            case CommPrimitive::AllGather: {
                auto it = gathers_.find(tag);
                if (it != gathers_.end() && int(it->second.patches.size()) == n_) return;
                break;
            }
            case CommPrimitive::StatReduce: {
                auto it = stat_slots_.find(tag);
                if (it != stat_slots_.end() && int(it->second.stats.size()) == n_) return;
                break;
            }
            case CommPrimitive::Halo: {
                auto it = halo_slots_.find(tag);
                if (it == halo_slots_.end()) break;
                const HaloSlot& s = it->second;
                const bool up = d == 0 || s.fresh.count(d - 1);
                const bool down = d == n_ - 1 || s.fresh.count(d + 1);
                if (up && down) return;
                break;
            }
        }
    }
    aborted_ = true;
    cv_.notify_all();
}

}  // namespace patchsim
