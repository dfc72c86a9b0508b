#pragma once

#include "patchsim/tensor.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace patchsim {

// Linear-beta DDPM schedule; alpha_bar[t] is the cumulative product of (1-beta).
struct NoiseSchedule {
    int total_steps = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::vector<double> alpha_bar;

    // alpha_bar at timestep t, with the final target t = -1 mapped to 1 (clean).
    double alpha_bar_at(int t) const;
};

NoiseSchedule make_schedule(int total_steps = 1000, double beta_start = 1e-4,
                            double beta_end = 2e-2);

// Strictly decreasing timesteps, uniform stride over [0, total_steps).
struct SamplerPlan {
    int num_steps = 50;
    std::vector<int> timesteps;
};

SamplerPlan make_plan(const NoiseSchedule& schedule, int num_steps = 50);

struct LatentState {
    Tensor x;
    int t = 0;
};

// Deterministic (eta=0) DDIM update on plain alpha_bar values.
// x0_pred = (x - sqrt(1-abar_t) eps) / sqrt(abar_t)
// x_next  = sqrt(abar_next) x0_pred + sqrt(1-abar_next) eps
Tensor ddim_update(const Tensor& x, const Tensor& eps, double abar_t, double abar_next);

// Schedule-indexed wrapper; t_next must be < state.t (or -1 for the final map).
LatentState ddim_step(const LatentState& state, const Tensor& eps, int t_next,
                      const NoiseSchedule& schedule);

// The model executor maps (x, t, condition-is-captured) -> eps. The indirection
// lets any runtime mode drive the same loop; the executor must return before
// the next ddim_step (the step boundary is a hard synchronization point).
using ModelExecutor = std::function<Tensor(const Tensor& x, int t)>;

struct SampleResult {
    Tensor x0;
    std::vector<LatentState> trajectory;  // model inputs x_t, in execution order
};

SampleResult sample(const ModelExecutor& executor, const SamplerPlan& plan,
                    const NoiseSchedule& schedule, int n, int c, int h, int w,
                    uint64_t init_seed);

// Consecutive-step input similarity: per-pair mean |x_t - x_{t-1}|, the
// observed dynamic range, and their ratio.
struct SimilarityReport {
    std::vector<double> per_step_mean_abs_diff;
    double mean_abs_diff = 0.0;
    double range_min = 0.0;
    double range_max = 0.0;
    double range() const { return range_max - range_min; }
    double ratio() const { return range() > 0.0 ? mean_abs_diff / range() : 0.0; }
};

SimilarityReport input_similarity_report(const std::vector<LatentState>& trajectory);

}  // namespace patchsim
