#pragma once

#include "patchsim/collectives.hpp"
#include "patchsim/model.hpp"
#include "patchsim/sampler.hpp"
#include "patchsim/trace.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace patchsim {

// N simulated device workers executing the layer graph per denoising step.
// Modes: Reference (single full pass), NaivePatch (independent patches),
// SyncPP (synchronous exchange each layer), Displaced (stale-activation reuse
// with asynchronous exchange).

enum class RunMode : uint8_t { Reference, NaivePatch, SyncPP, Displaced };
enum class GnScheme : uint8_t { Corrected, Stale, Separate };

const char* run_mode_name(RunMode m);
RunMode parse_run_mode(const std::string& name);      // throws std::invalid_argument
const char* gn_scheme_name(GnScheme s);
GnScheme parse_gn_scheme(const std::string& name);

// N contiguous equal row bands in device order; h must divide evenly.
std::vector<Region> partition_rows(int h, int n_devices, int full_w);

// A device's input band plus the derived band at every layer's input and
// output resolution. Throws if a band stops dividing at some level.
struct PatchSpec {
    Region input;
    std::vector<Region> layer_in;
    std::vector<Region> layer_out;
};

PatchSpec derive_patch_spec(const Model& m, const Region& input);

// Additive correction of stale global statistics by the local fresh-minus-
// stale delta. Groups whose corrected variance turns negative fall back to the
// fresh local statistics. Exact when prev_global == prev_local (N=1) and when
// fresh_local == prev_local (zero staleness).
GnStats corrected_gn_stats(const GnStats& fresh_local, const GnStats& prev_local,
                           const GnStats& prev_global);

struct RunnerOptions {
    RunMode mode = RunMode::Reference;
    int n_devices = 1;
    int warmup_steps = 4;  // displaced: sync steps after the first one
    GnScheme gn_scheme = GnScheme::Corrected;
    bool stress = false;   // inject scheduling noise into the collectives
    uint64_t stress_seed = 0x5EEDULL;
};

class PatchRunner {
public:
    PatchRunner(const Model& model, const Condition& cond, int h, int w, RunnerOptions opts);

    // One denoising step under the configured mode. Displaced runs the first
    // step plus warmup_steps synchronously, the remainder displaced.
    Tensor run_step(const Tensor& x, int t, int step_index);

    // Direct step entry points (also used by tests).
    Tensor step_reference(const Tensor& x, int t, int step_index);
    Tensor step_naive(const Tensor& x, int t, int step_index);
    Tensor step_sync(const Tensor& x, int t, int step_index);
    Tensor step_displaced(const Tensor& x, int t, int step_index);

    const RawTrace& trace() const { return trace_; }
    CommVolumes volumes() const { return hub_ ? hub_->volumes() : CommVolumes{}; }
    uint64_t total_macs() const { return total_macs_; }
    const std::vector<std::vector<uint64_t>>& step_device_macs() const {
        return step_device_macs_;
    }
    const PatchSpec& patch_spec(int device) const { return specs_[device]; }
    // Stale full-shape input of `layer` on `device` (empty pointer if absent).
    std::shared_ptr<const Tensor> cached_input(int device, int layer) const;

private:
    struct DeviceState {
        PatchSpec spec;
        std::vector<std::shared_ptr<const Tensor>> act_cache;
        std::vector<int> act_cache_step;  // step_index of the cached content, -1 = absent
        std::vector<GnStats> gn_local;
        std::vector<GnStats> gn_global;
        std::vector<int> gn_step;
    };

    Tensor device_step(int dev, const Tensor& x_full, int t, int step_index, bool displaced);
    Tensor run_workers(const Tensor& x, int t, int step_index, bool displaced);
    void record(int dev, RawEvent ev);
    void count_macs(int dev, int step_index, uint64_t macs);
    const Tensor& cond_k(int batch);
    const Tensor& cond_v(int batch);

    const Model& model_;
    Condition cond_;
    RunnerOptions opts_;
    int h_ = 0, w_ = 0;
    std::vector<DeviceState> devices_;
    std::vector<PatchSpec> specs_;
    std::unique_ptr<CollectiveHub> hub_;
    RawTrace trace_;
    uint64_t total_macs_ = 0;
    std::vector<std::vector<uint64_t>> step_device_macs_;
    Tensor cond_k_, cond_v_;  // per-run projected condition tokens
    std::mutex cond_mu_;
};

// ---- whole-run orchestration --------------------------------------------------

struct RunConfig {
    RunMode mode = RunMode::Reference;
    int n_devices = 1;
    int h = 48, w = 48;
    int num_steps = 50;
    int warmup = 4;
    GnScheme gn_scheme = GnScheme::Corrected;
    uint64_t model_seed = 42;
    uint64_t noise_seed = 1234;
    uint64_t cond_seed = 7;
    ModelConfig model;
    int schedule_steps = 1000;
    double beta_start = 1e-4, beta_end = 2e-2;
    bool stress = false;

    void validate() const;  // throws std::invalid_argument
};

struct RunResult {
    RunConfig config;
    Tensor x0;
    std::vector<LatentState> trajectory;
    SimilarityReport similarity;
    RawTrace trace{1};
    CommVolumes volumes;
    uint64_t total_macs = 0;
    std::vector<std::vector<uint64_t>> step_device_macs;
};

RunResult run_sampling(const RunConfig& cfg);

}  // namespace patchsim
