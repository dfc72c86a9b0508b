#include "patchsim/runtime.hpp"
#include "patchsim/costmodel.hpp"

#include <exception>
#include <stdexcept>
#include <thread>

namespace patchsim {

const char* run_mode_name(RunMode m) {
    switch (m) {
        case RunMode::Reference: return "reference";
        case RunMode::NaivePatch: return "naive";
        case RunMode::SyncPP: return "sync-pp";
        case RunMode::Displaced: return "displaced";
    }
    return "?";
}

RunMode parse_run_mode(const std::string& name) {
    if (name == "reference") return RunMode::Reference;
    if (name == "naive") return RunMode::NaivePatch;
    if (name == "sync-pp") return RunMode::SyncPP;
    if (name == "displaced") return RunMode::Displaced;
    throw std::invalid_argument("unknown mode '" + name +
                                "' (expected reference|naive|sync-pp|displaced)");
}

const char* gn_scheme_name(GnScheme s) {
    switch (s) {
        case GnScheme::Corrected: return "corrected";
        case GnScheme::Stale: return "stale";
        case GnScheme::Separate: return "separate";
    }
    return "?";
}

GnScheme parse_gn_scheme(const std::string& name) {
    if (name == "corrected") return GnScheme::Corrected;
    if (name == "stale") return GnScheme::Stale;
    if (name == "separate") return GnScheme::Separate;
    throw std::invalid_argument("unknown gn scheme '" + name +
                                "' (expected corrected|stale|separate)");
}

std::vector<Region> partition_rows(int h, int n_devices, int full_w) {
    if (n_devices < 1) throw std::invalid_argument("partition_rows: need at least one device");
    if (h <= 0 || h % n_devices != 0)
        throw std::invalid_argument("partition_rows: " + std::to_string(h) +
                                    " rows not divisible by " + std::to_string(n_devices) +
                                    " devices");
    std::vector<Region> regions;
    const int band = h / n_devices;
    for (int d = 0; d < n_devices; ++d)
        regions.push_back(Region{d * band, (d + 1) * band, h, full_w});
    return regions;
}

PatchSpec derive_patch_spec(const Model& m, const Region& input) {
    input.validate("derive_patch_spec");
    PatchSpec spec;
    spec.input = input;
    Region cur = input;
    for (const LayerDescriptor& d : m.layers) {
        spec.layer_in.push_back(cur);
        Region out = cur;
        if (d.kind == LayerKind::DownConv) {
            if (cur.row_start % 2 != 0 || cur.row_end % 2 != 0 || cur.full_h % 2 != 0 ||
                cur.full_w % 2 != 0)
                throw std::invalid_argument(
                    "patch rows [" + std::to_string(cur.row_start) + "," +
                    std::to_string(cur.row_end) + ") of " + std::to_string(cur.full_h) +
                    " are not divisible at layer " + std::to_string(d.id) +
                    " (DownConv); choose h divisible by devices*2^(levels-1)");
            out = Region{cur.row_start / 2, cur.row_end / 2, cur.full_h / 2, cur.full_w / 2};
        } else if (d.kind == LayerKind::Upsample) {
            out = Region{cur.row_start * 2, cur.row_end * 2, cur.full_h * 2, cur.full_w * 2};
        }
        spec.layer_out.push_back(out);
        cur = out;
    }
    return spec;
}

GnStats corrected_gn_stats(const GnStats& fresh_local, const GnStats& prev_local,
                           const GnStats& prev_global) {
    if (!fresh_local.same_shape(prev_local) || !fresh_local.same_shape(prev_global))
        throw std::invalid_argument("corrected_gn_stats: group-count mismatch");
    GnStats out(fresh_local.samples, fresh_local.groups);
    for (std::size_t e = 0; e < out.entries(); ++e) {
        if (prev_global.mean[e] == prev_local.mean[e] &&
            prev_global.mean_sq[e] == prev_local.mean_sq[e]) {
            // Degenerate (N=1): the correction reduces to the fresh local stats.
            out.mean[e] = fresh_local.mean[e];
            out.mean_sq[e] = fresh_local.mean_sq[e];
            continue;
        }
        out.mean[e] = prev_global.mean[e] + (fresh_local.mean[e] - prev_local.mean[e]);
        out.mean_sq[e] = prev_global.mean_sq[e] + (fresh_local.mean_sq[e] - prev_local.mean_sq[e]);
        if (out.mean_sq[e] - out.mean[e] * out.mean[e] < 0.0) {
            out.mean[e] = fresh_local.mean[e];
            out.mean_sq[e] = fresh_local.mean_sq[e];
        }
    }
    return out;
}

// ---- PatchRunner ---------------------------------------------------------------

PatchRunner::PatchRunner(const Model& model, const Condition& cond, int h, int w,
                         RunnerOptions opts)
    : model_(model), cond_(cond), opts_(opts), h_(h), w_(w),
      trace_(opts.mode == RunMode::Reference ? 1 : opts.n_devices) {
    if (opts_.mode == RunMode::Reference) opts_.n_devices = 1;
    if (opts_.n_devices < 1)
        throw std::invalid_argument("PatchRunner: need at least one device");
    // Naive mode repartitions per step (rows or columns) and never touches the
    // band specs; everything else works on fixed row bands.
    const int spec_devices = opts_.mode == RunMode::NaivePatch ? 1 : opts_.n_devices;
    const auto regions = partition_rows(h, spec_devices, w);
    for (const Region& r : regions) specs_.push_back(derive_patch_spec(model_, r));
    devices_.resize(opts_.n_devices);
    const std::size_t layers = model_.layers.size();
    for (int d = 0; d < opts_.n_devices; ++d) {
        devices_[d].spec = specs_[std::min<std::size_t>(d, specs_.size() - 1)];
        devices_[d].act_cache.resize(layers);
        devices_[d].act_cache_step.assign(layers, -1);
        devices_[d].gn_local.resize(layers);
        devices_[d].gn_global.resize(layers);
        devices_[d].gn_step.assign(layers, -1);
    }
    if (opts_.n_devices > 1)
        hub_ = std::make_unique<CollectiveHub>(opts_.n_devices, opts_.stress, opts_.stress_seed);
}

void PatchRunner::record(int dev, RawEvent ev) {
    ev.device = dev;
    trace_.per_device[dev].push_back(ev);
}

void PatchRunner::count_macs(int dev, int step_index, uint64_t macs) {
    step_device_macs_[step_index][dev] += macs;
}

const Tensor& PatchRunner::cond_k(int batch) {
    std::lock_guard<std::mutex> lk(cond_mu_);
    if (cond_k_.size() == 0) {
        for (const LayerDescriptor& d : model_.layers) {
            if (d.kind == LayerKind::CrossAttn) {
                auto kv = project_condition(model_, d, cond_, batch);
                cond_k_ = std::move(kv.first);
                cond_v_ = std::move(kv.second);
                break;
            }
        }
    }
    return cond_k_;
}

const Tensor& PatchRunner::cond_v(int batch) {
    cond_k(batch);
    return cond_v_;
}

std::shared_ptr<const Tensor> PatchRunner::cached_input(int device, int layer) const {
    return devices_.at(device).act_cache.at(layer);
}

Tensor PatchRunner::device_step(int dev, const Tensor& x_full, int t, int step_index,
                                bool displaced) {
    DeviceState& ds = devices_[dev];
    const int n_dev = opts_.n_devices;
    const std::vector<float> emb = timestep_embedding(t, model_.time_dim());

    Tensor fresh = n_dev == 1 ? x_full
                              : x_full.slice_rows(ds.spec.input.row_start, ds.spec.input.row_end);
    std::vector<Tensor> fresh_outs(model_.layers.size());

    for (const LayerDescriptor& d : model_.layers) {
        const int l = d.id;
        const Region& reg = ds.spec.layer_in[l];
        const uint64_t layer_macs = macs_of_layer(d, reg);
        Tensor out;

        if (d.needs_gather()) {
            std::shared_ptr<const Tensor> ctx;
            const uint64_t own_bytes = uint64_t(fresh.size()) * sizeof(float);
            const uint64_t xfer = own_bytes * uint64_t(n_dev - 1);
            if (!displaced) {
                // Synchronous exchange: gather the full fresh input, use it as
                // halo/KV context, and cache it for a later displaced step.
                const uint64_t tag = make_tag(step_index, l, CommPrimitive::AllGather);
                if (n_dev > 1) {
                    record(dev, {dev, step_index, l, RawKind::Post, CommPrimitive::AllGather, 0,
                                 xfer, xfer, tag});
                    hub_->post(dev, tag, fresh, reg.row_start);
                    record(dev, {dev, step_index, l, RawKind::Wait, CommPrimitive::AllGather, 0, 0,
                                 0, tag});
                    ctx = hub_->wait_full(dev, tag);
                } else {
                    ctx = std::make_shared<const Tensor>(fresh);
                }
                ds.act_cache[l] = ctx;
                ds.act_cache_step[l] = step_index;
                if (d.kind == LayerKind::SelfAttn)
                    out = layer_self_attn(d, *ctx, fresh);
                else
                    out = layer_conv(model_, d, *ctx, reg);
            } else {
                // Post this step's fresh patch immediately (non-blocking), then
                // make sure the stale full map from the previous step is here.
                if (n_dev > 1) {
                    const uint64_t tag = make_tag(step_index, l, CommPrimitive::AllGather);
                    record(dev, {dev, step_index, l, RawKind::Post, CommPrimitive::AllGather, 0,
                                 xfer, xfer, tag});
                    hub_->post(dev, tag, fresh, reg.row_start);
                    if (ds.act_cache_step[l] >= 0 && ds.act_cache_step[l] == step_index - 2) {
                        const uint64_t prev = make_tag(step_index - 1, l, CommPrimitive::AllGather);
                        record(dev, {dev, step_index, l, RawKind::Wait, CommPrimitive::AllGather,
                                     0, 0, 0, prev});
                        ds.act_cache[l] = hub_->wait_full(dev, prev);
                        ds.act_cache_step[l] = step_index - 1;
                    }
                }
                if (ds.act_cache_step[l] != step_index - 1)
                    throw std::runtime_error(
                        "displaced step " + std::to_string(step_index) +
                        ": no cached activation for layer " + std::to_string(l) + " (" +
                        layer_kind_name(d.kind) + "); run a synchronous step first");
                std::shared_ptr<const Tensor> stale = ds.act_cache[l];
                if (n_dev == 1) {
                    // Single device: the "gather" is just caching our full map.
                    ds.act_cache[l] = std::make_shared<const Tensor>(fresh);
                    ds.act_cache_step[l] = step_index;
                }
                const Tensor scattered = scatter_region(*stale, fresh, reg);
                if (d.kind == LayerKind::SelfAttn)
                    out = layer_self_attn(d, scattered, fresh);
                else
                    out = layer_conv(model_, d, scattered, reg);
            }
        } else if (d.kind == LayerKind::GroupNorm) {
            GnStats fresh_local = group_stats(fresh, d.groups);
            const double weight = double(reg.rows()) * reg.full_w;
            const uint64_t stat_bytes =
                uint64_t(fresh_local.entries()) * 2 * sizeof(double) * uint64_t(n_dev - 1);
            GnStats use;
            if (!displaced) {
                if (n_dev > 1) {
                    const uint64_t tag = make_tag(step_index, l, CommPrimitive::StatReduce);
                    record(dev, {dev, step_index, l, RawKind::Post, CommPrimitive::StatReduce, 0,
                                 stat_bytes, stat_bytes, tag});
                    hub_->post_stats(dev, tag, fresh_local, weight);
                    record(dev, {dev, step_index, l, RawKind::Wait, CommPrimitive::StatReduce, 0,
                                 0, 0, tag});
                    use = hub_->wait_stats(dev, tag);
                } else {
                    use = fresh_local;
                }
                ds.gn_local[l] = fresh_local;
                ds.gn_global[l] = use;
                ds.gn_step[l] = step_index;
            } else {
                if (n_dev > 1) {
                    const uint64_t tag = make_tag(step_index, l, CommPrimitive::StatReduce);
                    record(dev, {dev, step_index, l, RawKind::Post, CommPrimitive::StatReduce, 0,
                                 stat_bytes, stat_bytes, tag});
                    hub_->post_stats(dev, tag, fresh_local, weight);
                    if (ds.gn_step[l] >= 0 && ds.gn_step[l] == step_index - 2) {
                        const uint64_t prev = make_tag(step_index - 1, l, CommPrimitive::StatReduce);
                        record(dev, {dev, step_index, l, RawKind::Wait, CommPrimitive::StatReduce,
                                     0, 0, 0, prev});
                        ds.gn_global[l] = hub_->wait_stats(dev, prev);
                        ds.gn_step[l] = step_index - 1;
                    }
                }
                if (ds.gn_step[l] != step_index - 1)
                    throw std::runtime_error("displaced step " + std::to_string(step_index) +
                                             ": no cached GN statistics for layer " +
                                             std::to_string(l) +
                                             "; run a synchronous step first");
                switch (opts_.gn_scheme) {
                    case GnScheme::Corrected:
                        use = corrected_gn_stats(fresh_local, ds.gn_local[l], ds.gn_global[l]);
                        break;
                    case GnScheme::Stale:
                        use = ds.gn_global[l];
                        break;
                    case GnScheme::Separate:
                        use = fresh_local;
                        break;
                }
                ds.gn_local[l] = fresh_local;
                if (n_dev == 1) {
                    ds.gn_global[l] = fresh_local;
                    ds.gn_step[l] = step_index;
                }
            }
            out = group_norm_apply(fresh, {}, use, model_.weight_vec(d.weight),
                                   model_.weight_vec(d.bias), d.eps);
        } else {
            switch (d.kind) {
                case LayerKind::SiLU:
                    out = silu(fresh);
                    break;
                case LayerKind::Upsample:
                    out = upsample_nearest2x(fresh);
                    break;
                case LayerKind::CrossAttn:
                    out = layer_cross_attn(d, fresh, cond_k(fresh.n), cond_v(fresh.n));
                    break;
                case LayerKind::Linear:
                    out = layer_linear(model_, d, fresh);
                    break;
                case LayerKind::AddSkip:
                    out = add(fresh, fresh_outs[d.skip_source]);
                    break;
                case LayerKind::AddTimeEmb:
                    out = layer_time_emb(model_, d, fresh, emb);
                    break;
                default:
                    throw std::runtime_error("device_step: unhandled layer kind");
            }
        }

        count_macs(dev, step_index, layer_macs);
        record(dev, {dev, step_index, l, RawKind::Compute, CommPrimitive::AllGather, layer_macs,
                     0, 0, 0});
        fresh_outs[l] = out;
        fresh = std::move(out);
    }
    return fresh;
}

Tensor PatchRunner::run_workers(const Tensor& x, int t, int step_index, bool displaced) {
    if (x.h != h_ || x.w != w_)
        throw std::invalid_argument("run_step: input is " + x.shape_str() + ", runner expects " +
                                    std::to_string(h_) + "x" + std::to_string(w_));
    while (int(step_device_macs_.size()) <= step_index)
        step_device_macs_.emplace_back(opts_.n_devices, 0);

    const int n_dev = opts_.n_devices;
    if (n_dev == 1) {
        Tensor eps = device_step(0, x, t, step_index, displaced);
        total_macs_ += step_device_macs_[step_index][0];
        eps.require_finite("run_step");
        return eps;
    }

    std::vector<Tensor> outs(n_dev);
    std::vector<std::exception_ptr> errors(n_dev);
    std::vector<std::thread> workers;
    workers.reserve(n_dev);
    for (int d = 0; d < n_dev; ++d) {
        workers.emplace_back([&, d] {
            try {
                outs[d] = device_step(d, x, t, step_index, displaced);
            } catch (...) {
                errors[d] = std::current_exception();
                hub_->mark_failed(d);
            }
        });
    }
    for (auto& th : workers) th.join();
    for (int d = 0; d < n_dev; ++d)
        if (errors[d]) std::rethrow_exception(errors[d]);

    Tensor eps(x.n, outs[0].c, h_, w_);
    for (int d = 0; d < n_dev; ++d) {
        const Region& r = specs_[d].input;
        for (int in = 0; in < eps.n; ++in)
            for (int ic = 0; ic < eps.c; ++ic)
                for (int iy = 0; iy < outs[d].h; ++iy)
                    for (int ix = 0; ix < eps.w; ++ix)
                        eps.at(in, ic, r.row_start + iy, ix) = outs[d].at(in, ic, iy, ix);
        total_macs_ += step_device_macs_[step_index][d];
    }
    eps.require_finite("run_step");
    return eps;
}

Tensor PatchRunner::step_reference(const Tensor& x, int t, int step_index) {
    while (int(step_device_macs_.size()) <= step_index)
        step_device_macs_.emplace_back(opts_.n_devices, 0);
    for (const LayerDescriptor& d : model_.layers) {
        const int lh = x.h / d.scale_in, lw = x.w / d.scale_in;
        const uint64_t macs = macs_of_layer(d, Region{0, lh, lh, lw});
        count_macs(0, step_index, macs);
        record(0, {0, step_index, d.id, RawKind::Compute, CommPrimitive::AllGather, macs, 0, 0,
                   0});
    }
    total_macs_ += step_device_macs_[step_index][0];
    Tensor eps = forward_full(model_, x, t, cond_);
    eps.require_finite("step_reference");
    return eps;
}

Tensor PatchRunner::step_naive(const Tensor& x, int t, int step_index) {
    while (int(step_device_macs_.size()) <= step_index)
        step_device_macs_.emplace_back(opts_.n_devices, 0);
    const int n_dev = opts_.n_devices;
    const bool by_rows = step_index % 2 == 0;
    const int extent = by_rows ? x.h : x.w;
    if (extent % n_dev != 0)
        throw std::invalid_argument("naive: extent " + std::to_string(extent) +
                                    " not divisible by " + std::to_string(n_dev) + " devices");
    const int band = extent / n_dev;
    if (band % model_.cfg.depth_divisor() != 0)
        throw std::invalid_argument("naive: patch extent " + std::to_string(band) +
                                    " violates model divisibility (" +
                                    std::to_string(model_.cfg.depth_divisor()) + ")");

    std::vector<Tensor> outs(n_dev);
    std::vector<std::exception_ptr> errors(n_dev);
    std::vector<std::thread> workers;
    for (int d = 0; d < n_dev; ++d) {
        workers.emplace_back([&, d] {
            try {
                const Tensor patch = by_rows ? x.slice_rows(d * band, (d + 1) * band)
                                             : x.slice_cols(d * band, (d + 1) * band);
                for (const LayerDescriptor& ld : model_.layers) {
                    const int lh = patch.h / ld.scale_in, lw = patch.w / ld.scale_in;
                    const uint64_t macs = macs_of_layer(ld, Region{0, lh, lh, lw});
                    count_macs(d, step_index, macs);
                    record(d, {d, step_index, ld.id, RawKind::Compute, CommPrimitive::AllGather,
                               macs, 0, 0, 0});
                }
                outs[d] = forward_full(model_, patch, t, cond_);
            } catch (...) {
                errors[d] = std::current_exception();
            }
        });
    }
    for (auto& th : workers) th.join();
    for (int d = 0; d < n_dev; ++d)
        if (errors[d]) std::rethrow_exception(errors[d]);

    Tensor eps(x.n, outs[0].c, x.h, x.w);
    for (int d = 0; d < n_dev; ++d) {
        for (int in = 0; in < eps.n; ++in)
            for (int ic = 0; ic < eps.c; ++ic)
                for (int iy = 0; iy < outs[d].h; ++iy)
                    for (int ix = 0; ix < outs[d].w; ++ix) {
                        const int oy = by_rows ? d * band + iy : iy;
                        const int ox = by_rows ? ix : d * band + ix;
                        eps.at(in, ic, oy, ox) = outs[d].at(in, ic, iy, ix);
                    }
        total_macs_ += step_device_macs_[step_index][d];
    }
    eps.require_finite("step_naive");
    return eps;
}

Tensor PatchRunner::step_sync(const Tensor& x, int t, int step_index) {
    return run_workers(x, t, step_index, /*displaced=*/false);
}

Tensor PatchRunner::step_displaced(const Tensor& x, int t, int step_index) {
    return run_workers(x, t, step_index, /*displaced=*/true);
}

Tensor PatchRunner::run_step(const Tensor& x, int t, int step_index) {
    switch (opts_.mode) {
        case RunMode::Reference:
            return step_reference(x, t, step_index);
        case RunMode::NaivePatch:
            return step_naive(x, t, step_index);
        case RunMode::SyncPP:
            return step_sync(x, t, step_index);
        case RunMode::Displaced:
            // The first step always runs synchronously; warmup adds more.
            if (step_index < 1 + opts_.warmup_steps) return step_sync(x, t, step_index);
            return step_displaced(x, t, step_index);
    }
    throw std::invalid_argument("run_step: bad mode");
}

// ---- whole-run orchestration ------------------------------------------------

void RunConfig::validate() const {
    model.validate();
    if (n_devices < 1) throw std::invalid_argument("config: devices must be >= 1");
    if (num_steps < 1 || num_steps > schedule_steps)
        throw std::invalid_argument("config: steps out of range");
    if (warmup < 0) throw std::invalid_argument("config: warmup must be >= 0");
    if (h <= 0 || w <= 0) throw std::invalid_argument("config: bad image size");
    const int div = model.depth_divisor() * n_devices;
    if (h % div != 0 || w % div != 0)
        throw std::invalid_argument("config: size " + std::to_string(h) + "x" +
                                    std::to_string(w) + " must be divisible by devices*2^(levels-1) = " +
                                    std::to_string(div));
}

RunResult run_sampling(const RunConfig& cfg) {
    cfg.validate();
    const Model model = build_model(cfg.model, cfg.model_seed);
    const Condition cond = random_condition(cfg.model.cond_dim, cfg.cond_seed);
    const NoiseSchedule schedule = make_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end);
    const SamplerPlan plan = make_plan(schedule, cfg.num_steps);

    RunnerOptions opts;
    opts.mode = cfg.mode;
    opts.n_devices = cfg.mode == RunMode::Reference ? 1 : cfg.n_devices;
    opts.warmup_steps = cfg.warmup;
    opts.gn_scheme = cfg.gn_scheme;
    opts.stress = cfg.stress;
    PatchRunner runner(model, cond, cfg.h, cfg.w, opts);

    int step_counter = 0;
    const ModelExecutor exec = [&](const Tensor& x, int t) {
        return runner.run_step(x, t, step_counter++);
    };
    SampleResult s = sample(exec, plan, schedule, 1, cfg.model.in_channels, cfg.h, cfg.w,
                            cfg.noise_seed);

    RunResult res;
    res.config = cfg;
    res.x0 = std::move(s.x0);
    res.trajectory = std::move(s.trajectory);
    res.similarity = input_similarity_report(res.trajectory);
    res.trace = runner.trace();
    res.volumes = runner.volumes();
    res.total_macs = runner.total_macs();
    res.step_device_macs = runner.step_device_macs();
    return res;
}

}  // namespace patchsim
