#include "patchsim/sampler.hpp"
#include "patchsim/rng.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace patchsim {

double NoiseSchedule::alpha_bar_at(int t) const {
    if (t == -1) return 1.0;
    if (t < 0 || t >= int(alpha_bar.size()))
        throw std::invalid_argument("schedule: timestep " + std::to_string(t) + " out of range");
    return alpha_bar[t];
}

NoiseSchedule make_schedule(int total_steps, double beta_start, double beta_end) {
    if (total_steps < 1) throw std::invalid_argument("make_schedule: total_steps must be >= 1");
    if (beta_start < 0.0 || beta_end < 0.0 || beta_start >= 1.0 || beta_end >= 1.0)
        throw std::invalid_argument("make_schedule: betas must lie in [0, 1)");
    NoiseSchedule s;
    s.total_steps = total_steps;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.alpha_bar.resize(total_steps);
    double prod = 1.0;
    for (int t = 0; t < total_steps; ++t) {
        const double frac = total_steps == 1 ? 0.0 : double(t) / double(total_steps - 1);
        const double beta = beta_start + (beta_end - beta_start) * frac;
        prod *= 1.0 - beta;
        s.alpha_bar[t] = prod;
    }
    return s;
}

SamplerPlan make_plan(const NoiseSchedule& schedule, int num_steps) {
    if (num_steps < 1 || num_steps > schedule.total_steps)
        throw std::invalid_argument("make_plan: num_steps out of range");
    SamplerPlan plan;
    plan.num_steps = num_steps;
    const int stride = schedule.total_steps / num_steps;
    for (int i = num_steps - 1; i >= 0; --i) plan.timesteps.push_back(i * stride);
    return plan;
}

Tensor ddim_update(const Tensor& x, const Tensor& eps, double abar_t, double abar_next) {
    if (!x.same_shape(eps))
        throw std::invalid_argument("ddim_update: eps shape " + eps.shape_str() +
                                    " != state shape " + x.shape_str());
    const double sqrt_abar_t = std::sqrt(abar_t);
    const double sqrt_one_minus_t = std::sqrt(1.0 - abar_t);
    const double sqrt_abar_n = std::sqrt(abar_next);
    const double sqrt_one_minus_n = std::sqrt(1.0 - abar_next);
    Tensor out = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double x0_pred = (double(x.data[i]) - sqrt_one_minus_t * double(eps.data[i])) /
                               sqrt_abar_t;
        out.data[i] = float(sqrt_abar_n * x0_pred + sqrt_one_minus_n * double(eps.data[i]));
    }
    return out;
}

LatentState ddim_step(const LatentState& state, const Tensor& eps, int t_next,
                      const NoiseSchedule& schedule) {
    if (t_next != -1 && t_next >= state.t)
        throw std::invalid_argument("ddim_step: timestep must decrease (" +
                                    std::to_string(state.t) + " -> " + std::to_string(t_next) +
                                    ")");
    LatentState next;
    next.x = ddim_update(state.x, eps, schedule.alpha_bar_at(state.t),
                         schedule.alpha_bar_at(t_next));
    next.t = t_next;
    return next;
}

SampleResult sample(const ModelExecutor& executor, const SamplerPlan& plan,
                    const NoiseSchedule& schedule, int n, int c, int h, int w,
                    uint64_t init_seed) {
    if (plan.timesteps.empty()) throw std::invalid_argument("sample: empty plan");
    SampleResult res;
    LatentState state{random_normal(n, c, h, w, init_seed), plan.timesteps.front()};
    for (std::size_t i = 0; i < plan.timesteps.size(); ++i) {
        state.t = plan.timesteps[i];
        res.trajectory.push_back(state);
        Tensor eps = executor(state.x, state.t);
        if (!eps.same_shape(state.x))
            throw std::runtime_error("sample: executor returned shape " + eps.shape_str() +
                                     ", expected " + state.x.shape_str());
        const int t_next = i + 1 < plan.timesteps.size() ? plan.timesteps[i + 1] : -1;
        state = ddim_step(state, eps, t_next, schedule);
    }
    state.x.require_finite("sample");
    res.x0 = std::move(state.x);
    return res;
}

SimilarityReport input_similarity_report(const std::vector<LatentState>& trajectory) {
    SimilarityReport rep;
    rep.range_min = std::numeric_limits<double>::infinity();
    rep.range_max = -std::numeric_limits<double>::infinity();
    for (const LatentState& s : trajectory)
        for (float v : s.x.data) {
            rep.range_min = std::min(rep.range_min, double(v));
            rep.range_max = std::max(rep.range_max, double(v));
        }
    if (trajectory.empty()) {
        rep.range_min = rep.range_max = 0.0;
        return rep;
    }
    double total = 0.0;
    for (std::size_t i = 1; i < trajectory.size(); ++i) {
        const Tensor& a = trajectory[i - 1].x;
        const Tensor& b = trajectory[i].x;
        if (!a.same_shape(b))
            throw std::invalid_argument("similarity: trajectory shapes differ");
        double acc = 0.0;
        for (std::size_t j = 0; j < a.size(); ++j)
            acc += std::abs(double(a.data[j]) - double(b.data[j]));
        const double mean = acc / double(a.size());
        rep.per_step_mean_abs_diff.push_back(mean);
        total += mean;
    }
    if (!rep.per_step_mean_abs_diff.empty())
        rep.mean_abs_diff = total / double(rep.per_step_mean_abs_diff.size());
    return rep;
}

}  // namespace patchsim
