#include "patchsim/sampler.hpp"
#include "patchsim/model.hpp"
#include "patchsim/runtime.hpp"

#include <doctest.h>

#include <stdexcept>

#include <cmath>

using namespace patchsim;

TEST_SUITE_BEGIN("sampler");

TEST_CASE("make_schedule") {
    SUBCASE("zero betas give alpha_bar of one") {
        const NoiseSchedule s = make_schedule(10, 0.0, 0.0);
        for (double a : s.alpha_bar) CHECK(a == 1.0);
    }
    SUBCASE("single step") {
        const NoiseSchedule s = make_schedule(1, 1e-4, 2e-2);
        CHECK(s.alpha_bar[0] == doctest::Approx(1.0 - 1e-4));
    }
    SUBCASE("defaults: strictly decreasing, alpha_bar[999] below 1e-4") {
        const NoiseSchedule s = make_schedule();
        for (int t = 1; t < 1000; ++t) CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
        // direct product oracle
        double prod = 1.0;
        for (int t = 0; t < 1000; ++t)
            prod *= 1.0 - (1e-4 + (2e-2 - 1e-4) * t / 999.0);
        CHECK(s.alpha_bar[999] == doctest::Approx(prod).epsilon(1e-12));
        CHECK(s.alpha_bar[999] < 1e-4);
        CHECK(s.alpha_bar[0] > 0.0);
        CHECK(s.alpha_bar[0] <= 1.0);
    }
}

TEST_CASE("make_plan uses a uniform decreasing stride") {
    const NoiseSchedule s = make_schedule();
    const SamplerPlan p = make_plan(s, 50);
    REQUIRE(p.timesteps.size() == 50);
    CHECK(p.timesteps.front() == 980);
    CHECK(p.timesteps.back() == 0);
    for (std::size_t i = 1; i < p.timesteps.size(); ++i)
        CHECK(p.timesteps[i] < p.timesteps[i - 1]);
}

TEST_CASE("ddim_update with zero eps is a pure rescale") {
    const Tensor x = random_normal(1, 1, 4, 4, 7);
    const Tensor eps(1, 1, 4, 4, 0.0f);
    const double abar_t = 0.25, abar_n = 0.64;
    const Tensor y = ddim_update(x, eps, abar_t, abar_n);
    const double factor = std::sqrt(abar_n / abar_t);
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(std::abs(double(y.data[i]) - factor * double(x.data[i])) <= 1e-6);
}

TEST_CASE("ddim_update with equal alpha_bar leaves x unchanged") {
    const Tensor x = random_normal(1, 1, 2, 2, 8);
    const Tensor eps = random_normal(1, 1, 2, 2, 9);
    const Tensor y = ddim_update(x, eps, 0.5, 0.5);
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(y.data[i] == doctest::Approx(x.data[i]).epsilon(1e-6));
}

TEST_CASE("ddim_update scalar case against a hand calculator") {
    Tensor x(1, 1, 1, 1, 1.0f);
    Tensor eps(1, 1, 1, 1, 0.5f);
    const Tensor y = ddim_update(x, eps, 0.25, 0.81);
    // x0_pred = (1 - sqrt(0.75)*0.5)/0.5 = 1.1339745962155614
    // x_next  = 0.9*x0_pred + sqrt(0.19)*0.5 = 1.238522083771039
    CHECK(y.data[0] == doctest::Approx(1.238522083771039).epsilon(1e-6));
}

TEST_CASE("ddim_step rejects non-decreasing timesteps") {
    const NoiseSchedule s = make_schedule();
    LatentState st{Tensor(1, 1, 1, 1, 1.0f), 100};
    const Tensor eps(1, 1, 1, 1, 0.0f);
    CHECK_THROWS_AS(ddim_step(st, eps, 100, s), std::invalid_argument);
    CHECK_THROWS_AS(ddim_step(st, eps, 150, s), std::invalid_argument);
    CHECK_NOTHROW(ddim_step(st, eps, -1, s));
    CHECK_THROWS_AS(ddim_update(st.x, Tensor(1, 1, 1, 2, 0.0f), 0.5, 0.4),
                    std::invalid_argument);
}

TEST_CASE("sample with a zero executor collapses to a closed-form rescale") {
    const NoiseSchedule s = make_schedule();
    const SamplerPlan p = make_plan(s, 10);
    const ModelExecutor zero = [](const Tensor& x, int) { return Tensor(x.n, x.c, x.h, x.w); };
    const SampleResult r = sample(zero, p, s, 1, 1, 4, 4, 77);
    const Tensor x_T = random_normal(1, 1, 4, 4, 77);
    const double factor = std::sqrt(1.0 / s.alpha_bar_at(p.timesteps.front()));
    for (std::size_t i = 0; i < x_T.size(); ++i)
        CHECK(r.x0.data[i] ==
              doctest::Approx(factor * double(x_T.data[i])).epsilon(1e-4));
}

TEST_CASE("sample rejects an executor with a mismatched shape") {
    const NoiseSchedule s = make_schedule();
    const SamplerPlan p = make_plan(s, 2);
    const ModelExecutor bad = [](const Tensor& x, int) {
        return Tensor(x.n, x.c, x.h, 2 * x.w);
    };
    CHECK_THROWS_AS(sample(bad, p, s, 1, 1, 2, 2, 1), std::runtime_error);
}

TEST_CASE("sample is deterministic") {
    const NoiseSchedule s = make_schedule();
    const SamplerPlan p = make_plan(s, 5);
    int calls = 0;
    const ModelExecutor ex = [&](const Tensor& x, int t) {
        ++calls;
        Tensor eps = x;
        for (auto& v : eps.data) v = float(0.01 * std::tanh(v) + 1e-4 * t);
        return eps;
    };
    const SampleResult a = sample(ex, p, s, 1, 2, 4, 4, 5);
    const SampleResult b = sample(ex, p, s, 1, 2, 4, 4, 5);
    CHECK(calls == 10);
    CHECK(a.x0.data == b.x0.data);
    CHECK(a.trajectory.size() == 5);
}

TEST_CASE("two-step plan matches a hand-unrolled pair of updates") {
    const NoiseSchedule s = make_schedule();
    SamplerPlan p;
    p.num_steps = 2;
    p.timesteps = {500, 0};
    Tensor eps_const(1, 1, 2, 2, 0.3f);
    const ModelExecutor ex = [&](const Tensor&, int) { return eps_const; };
    const SampleResult r = sample(ex, p, s, 1, 1, 2, 2, 123);

    const Tensor x_T = random_normal(1, 1, 2, 2, 123);
    const double a500 = s.alpha_bar_at(500), a0 = s.alpha_bar_at(0);
    for (std::size_t i = 0; i < x_T.size(); ++i) {
        // step 1: t=500 -> t=0
        double x = x_T.data[i];
        double x0p = (x - std::sqrt(1.0 - a500) * 0.3) / std::sqrt(a500);
        x = std::sqrt(a0) * x0p + std::sqrt(1.0 - a0) * 0.3;
        x = double(float(x));
        // step 2: t=0 -> clean (alpha_bar := 1)
        x0p = (x - std::sqrt(1.0 - a0) * 0.3) / std::sqrt(a0);
        x = x0p;
        CHECK(r.x0.data[i] == doctest::Approx(float(x)).epsilon(1e-5));
    }
}

TEST_CASE("input similarity report") {
    SUBCASE("identical states give zero") {
        const Tensor x = random_normal(1, 1, 3, 3, 11);
        std::vector<LatentState> traj = {{x, 10}, {x, 5}};
        const SimilarityReport rep = input_similarity_report(traj);
        CHECK(rep.mean_abs_diff == 0.0);
    }
    SUBCASE("constant offset of 0.5") {
        const Tensor x = random_normal(1, 1, 3, 3, 12);
        Tensor y = x;
        for (auto& v : y.data) v += 0.5f;
        std::vector<LatentState> traj = {{x, 10}, {y, 5}};
        CHECK(input_similarity_report(traj).mean_abs_diff == doctest::Approx(0.5));
    }
    SUBCASE("50-step ratio is below the 10-step ratio on a toy run") {
        RunConfig cfg;
        cfg.model.in_channels = 2;
        cfg.model.base_channels = 8;
        cfg.model.levels = 2;
        cfg.h = cfg.w = 16;
        cfg.mode = RunMode::Reference;
        cfg.num_steps = 50;
        const double r50 = run_sampling(cfg).similarity.ratio();
        cfg.num_steps = 10;
        const double r10 = run_sampling(cfg).similarity.ratio();
        CHECK(r50 < r10);
        CHECK(r50 > 0.0);
    }
}

TEST_SUITE_END();
