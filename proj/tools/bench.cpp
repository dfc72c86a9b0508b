// Micro-benchmark: OpenMP kernels vs the serial reference implementations.
// Also cross-checks that both paths agree, since the serial code doubles as
// the test oracle.

#include "patchsim/tensor.hpp"
#include "../tests/serial_reference.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace patchsim;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
    fn();  // warm-up
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(double(a.data[i]) - double(b.data[i])));
    return m;
}

void row(const char* name, double serial_ms, double parallel_ms, double diff) {
    std::printf("%-22s %10.3f ms %10.3f ms %8.2fx   max|diff| %.2e\n", name, serial_ms,
                parallel_ms, serial_ms / parallel_ms, diff);
}

}  // namespace

int main() {
#ifdef _OPENMP
    std::printf("OpenMP threads: %d\n", omp_get_max_threads());
#else
    std::printf("OpenMP not enabled; comparing identical serial paths\n");
#endif
    std::printf("%-22s %13s %13s %9s\n", "kernel", "serial", "parallel", "speedup");

    const int reps = 5;
    {
        const Tensor x = random_normal(1, 32, 96, 96, 1);
        const Tensor w = random_normal(32, 32, 3, 3, 2);
        const std::vector<float> bias(32, 0.1f);
        Tensor out_p, out_s;
        const double sp = time_ms([&] { out_p = conv2d(x, w, bias, 1, 1); }, reps);
        const double ss = time_ms([&] { out_s = ref::conv2d_serial(x, w, bias, 1, 1); }, reps);
        row("conv2d 32x96x96", ss, sp, max_abs_diff(out_p, out_s));
    }
    {
        const Tensor q = random_normal(1, 1, 1024, 64, 3);
        const Tensor k = random_normal(1, 1, 1024, 64, 4);
        const Tensor v = random_normal(1, 1, 1024, 64, 5);
        Tensor out_p, out_s;
        const float scale = 1.0f / std::sqrt(64.0f);
        const double sp = time_ms([&] { out_p = attention(q, k, v, scale); }, reps);
        const double ss = time_ms([&] { out_s = ref::attention_serial(q, k, v, scale); }, reps);
        row("attention 1024x64", ss, sp, max_abs_diff(out_p, out_s));
    }
    {
        const Tensor tok = random_normal(1, 1, 4096, 128, 6);
        const Tensor w = random_normal(128, 128, 1, 1, 7);
        const std::vector<float> bias(128, 0.0f);
        Tensor out_p, out_s;
        const double sp = time_ms([&] { out_p = linear(tok, w, bias); }, reps);
        const double ss = time_ms([&] { out_s = ref::matmul_serial(tok, w, bias); }, reps);
        row("linear 4096x128", ss, sp, max_abs_diff(out_p, out_s));
    }
    {
        const Tensor x = random_normal(2, 64, 96, 96, 8);
        GnStats st_p, st_s;
        const double sp = time_ms([&] { st_p = group_stats(x, 8); }, reps);
        const double ss = time_ms([&] { st_s = ref::group_stats_serial(x, 8); }, reps);
        double diff = 0.0;
        for (std::size_t e = 0; e < st_p.entries(); ++e) {
            diff = std::max(diff, std::abs(st_p.mean[e] - st_s.mean[e]));
            diff = std::max(diff, std::abs(st_p.mean_sq[e] - st_s.mean_sq[e]));
        }
        row("group_stats 64x96x96", ss, sp, diff);
    }
    return 0;
}
