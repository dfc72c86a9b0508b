#pragma once

#include "patchsim/tensor.hpp"
#include "patchsim/trace.hpp"

#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <utility>
#include <vector>

namespace patchsim {

// In-process message hub for the simulated devices. All cross-device exchange
// goes through tagged collectives; assembly order is fixed (device order), so
// results do not depend on arrival order or thread scheduling.
//
// Deadlock detection is logical, not wall-clock: if every live device is
// blocked and none of the awaited tags can complete, everyone is woken with an
// error. A device that fails marks itself so peers stop waiting for it.
class CollectiveHub {
public:
    CollectiveHub(int n_devices, bool stress, uint64_t stress_seed);

    int devices() const { return n_; }

    // AllGather over row patches. post() never blocks; wait_full() blocks until
    // all devices have posted the tag and returns the row-assembled tensor.
    // `stalled` (optional) reports whether this wait actually blocked.
    void post(int device, uint64_t tag, Tensor patch, int row_start);
    std::shared_ptr<const Tensor> wait_full(int device, uint64_t tag, bool* stalled = nullptr);

    // Weighted GN statistic reduction; weight is the device's pixel count.
    void post_stats(int device, uint64_t tag, GnStats stats, double weight);
    GnStats wait_stats(int device, uint64_t tag, bool* stalled = nullptr);

    // Synchronous neighbour exchange of boundary rows. Returns {top, bottom}
    // halo tensors with `halo_rows` rows each (zero rows at the image edges).
    std::pair<Tensor, Tensor> halo_exchange(int device, uint64_t tag, const Tensor& fresh,
                                            int halo_rows);

    // Marks a device as failed/finished so waiting peers error out instead of
    // blocking forever.
    void mark_failed(int device);

    CommVolumes volumes() const;

private:
    struct GatherSlot {
        std::map<int, std::pair<Tensor, int>> patches;  // device -> (patch, row_start)
        std::shared_ptr<const Tensor> assembled;
        int consumed = 0;
    };
    struct StatSlot {
        std::map<int, std::pair<GnStats, double>> stats;  // device -> (stats, weight)
        bool combined_ready = false;
        GnStats combined;
        int consumed = 0;
    };
    struct HaloSlot {
        std::map<int, Tensor> fresh;  // device -> its fresh patch
        int halo_rows = 0;
        int consumed = 0;
    };

    void maybe_stress(int device);
    void check_stuck_locked();
    void account_locked(CommPrimitive prim, uint64_t recv, uint64_t sent);

    const int n_;
    const bool stress_;
    std::vector<uint64_t> stress_states_;

    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::map<uint64_t, GatherSlot> gathers_;
    std::map<uint64_t, StatSlot> stat_slots_;
    std::map<uint64_t, HaloSlot> halo_slots_;
    std::vector<uint8_t> failed_;
    std::vector<uint64_t> waiting_on_;  // 0 = not waiting
    int n_waiting_ = 0;
    bool aborted_ = false;
    CommVolumes volumes_;
};

}  // namespace patchsim
