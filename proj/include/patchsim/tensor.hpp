#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace patchsim {

// Dense 4-D activation/weight tensor, row-major (n, c, h, w), float32 payload.
// Every reduction in the kernels below accumulates in double in a fixed
// row-major order and rounds to float once, so repeated calls (and any OpenMP
// schedule) produce bit-identical results.
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<float> data;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_, float fill = 0.0f);

    std::size_t size() const { return data.size(); }
    bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
    std::string shape_str() const;

    std::size_t idx(int in, int ic, int iy, int ix) const {
        return ((std::size_t(in) * c + ic) * h + iy) * w + ix;
    }
    float at(int in, int ic, int iy, int ix) const { return data[idx(in, ic, iy, ix)]; }
    float& at(int in, int ic, int iy, int ix) { return data[idx(in, ic, iy, ix)]; }

    // Throws std::runtime_error naming `who` if any value is NaN/Inf.
    void require_finite(const std::string& who) const;

    // Row-band slice [row_start, row_end) over the spatial h axis.
    Tensor slice_rows(int row_start, int row_end) const;
    // Column-band slice [col_start, col_end) over the spatial w axis.
    Tensor slice_cols(int col_start, int col_end) const;
};

// A device's assigned row band of a full-shape spatial map, half-open.
struct Region {
    int row_start = 0;
    int row_end = 0;
    int full_h = 0;
    int full_w = 0;

    int rows() const { return row_end - row_start; }
    bool is_full() const { return row_start == 0 && row_end == full_h; }
    void validate(const std::string& who) const;
};

inline Region full_region(const Tensor& x) { return Region{0, x.h, x.h, x.w}; }

// Per-(sample, group) first and second moments. Exact stats satisfy
// mean_sq >= mean^2; corrected approximations may not until the fallback runs.
struct GnStats {
    int samples = 0;
    int groups = 0;
    std::vector<double> mean;     // samples * groups, sample-major
    std::vector<double> mean_sq;  // samples * groups

    GnStats() = default;
    GnStats(int samples_, int groups_)
        : samples(samples_), groups(groups_),
          mean(std::size_t(samples_) * groups_, 0.0),
          mean_sq(std::size_t(samples_) * groups_, 0.0) {}

    std::size_t entries() const { return mean.size(); }
    bool same_shape(const GnStats& o) const { return samples == o.samples && groups == o.groups; }
};

// ---- kernels ---------------------------------------------------------------

// Cross-correlation with zero padding. weight dims (c_out, c_in, k, k), k odd.
Tensor conv2d(const Tensor& x, const Tensor& weight, std::span<const float> bias,
              int stride, int pad);

// Rows [row_start, row_end) of conv2d(x_full, ...). Output rows are the input
// band divided by stride (ceil on both ends); halo rows are read from x_full.
Tensor conv2d_region(const Tensor& x_full, const Region& region, const Tensor& weight,
                     std::span<const float> bias, int stride, int pad);

// Token matrices are tensors shaped (n, 1, tokens, features).
Tensor linear(const Tensor& tokens, const Tensor& weight, std::span<const float> bias);

// softmax(q k^T * scale) v with per-row max subtraction. Each output row
// depends only on the matching query row.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, float scale);

// Per-(sample, group) mean and mean-of-squares over the channels of the group
// times the spatial extent of `region` (full extent when absent).
GnStats group_stats(const Tensor& x, int groups, const std::optional<Region>& region = {});

// (x - mean) / sqrt(var + eps) * gamma + beta over the region rows (full
// tensor when absent); rows outside the region are copied through.
// A negative per-group variance here is a contract violation.
Tensor group_norm_apply(const Tensor& x, const std::optional<Region>& region,
                        const GnStats& stats, std::span<const float> gamma,
                        std::span<const float> beta, float eps);

// Copy of stale_full with rows [row_start, row_end) replaced by fresh.
Tensor scatter_region(const Tensor& stale_full, const Tensor& fresh, const Region& region);

Tensor silu(const Tensor& x);
Tensor add(const Tensor& x, const Tensor& y);
Tensor upsample_nearest2x(const Tensor& x);

// 10*log10(peak^2 / MSE); +infinity for identical inputs.
double psnr(const Tensor& a, const Tensor& b, double peak);

// (n, c, h, w) -> (n, 1, h*w, c) token view and back.
Tensor to_tokens(const Tensor& x);
Tensor from_tokens(const Tensor& tokens, int c, int h, int w);

// Standard-normal tensor from a seeded Box-Muller/splitmix64 stream.
Tensor random_normal(int n, int c, int h, int w, uint64_t seed);

}  // namespace patchsim
