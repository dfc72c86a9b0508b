#pragma once

#include "patchsim/costmodel.hpp"
#include "patchsim/runtime.hpp"

#include <string>
#include <vector>

namespace patchsim {

// ---- TNSR: magic "TNSR", version byte 1, ndim u32 LE, dims u32 LE each,
// payload f32 LE row-major. Round-trips are bit-exact.
void write_tnsr(const Tensor& x, const std::string& path);
Tensor read_tnsr(const std::string& path);

// ---- PGM: P5 with the channel pages stacked vertically, min-max normalized
// over [lo, hi] (round half up). A zero range writes mid-gray.
void write_pgm(const Tensor& x, const std::string& path, double lo, double hi);

// "key = value" cost-profile file mirroring CostParams field names.
CostParams parse_cost_profile(const std::string& path);

// Model weights flattened (pool order) into a single TNSR for cross-run
// reproducibility. load_weights validates the total element count.
void dump_weights(const Model& m, const std::string& path);
void load_weights(Model& m, const std::string& path);

struct ExperimentConfig {
    RunConfig run;
    CostParams cost;
    std::string out_dir = "out";
    std::string compare_against;  // TNSR path for PSNR (optional)
    std::vector<std::string> emit = {"image", "tensor", "trace", "metrics"};
};

struct ExperimentOutcome {
    RunResult run;
    SimResult sim;
    bool has_psnr = false;
    double psnr_db = 0.0;
    double psnr_peak = 0.0;
    uint64_t per_device_macs = 0;
    uint64_t pp_estimate = 0, tp_estimate = 0;
};

// Runs the experiment and the cost simulation; no file I/O.
ExperimentOutcome execute_experiment(const ExperimentConfig& cfg);
// Same, with PSNR taken against an in-memory reference image.
ExperimentOutcome execute_experiment(const ExperimentConfig& cfg, const Tensor* reference);

// Long-form "metric,value" text for a single run.
std::string format_metrics(const ExperimentConfig& cfg, const ExperimentOutcome& out);

// Writes the artifacts selected by cfg.emit under cfg.out_dir.
void write_artifacts(const ExperimentConfig& cfg, const ExperimentOutcome& out);

// One wide CSV row per experiment:
// mode,N,steps,warmup,psnr_db_vs_reference,total_macs,per_device_macs,
// comm_bytes,stall_us,makespan_us,similarity_ratio
// Reference runs for PSNR are produced (and reused) internally.
std::string run_matrix(const std::vector<ExperimentConfig>& configs);

// Full CLI; returns the process exit code (0 ok, 2 config error, 1 runtime).
int cli_run(const std::vector<std::string>& args);

}  // namespace patchsim
