#include "patchsim/tensor.hpp"
#include "patchsim/rng.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace patchsim {

namespace {

// OpenMP is only worth the fork for reasonably sized maps.
constexpr std::int64_t kParallelCutoff = 1 << 12;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void require(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

}  // namespace

Tensor::Tensor(int n_, int c_, int h_, int w_, float fill)
    : n(n_), c(c_), h(h_), w(w_) {
    require(n >= 0 && c >= 0 && h >= 0 && w >= 0, "Tensor: negative dimension");
    data.assign(std::size_t(n) * c * h * w, fill);
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
}

void Tensor::require_finite(const std::string& who) const {
    for (float v : data) {
        if (!std::isfinite(v)) {
            throw std::runtime_error(who + ": non-finite value in tensor " + shape_str());
        }
    }
}

Tensor Tensor::slice_rows(int row_start, int row_end) const {
    require(0 <= row_start && row_start < row_end && row_end <= h,
            "slice_rows: bad row range");
    Tensor out(n, c, row_end - row_start, w);
    for (int in = 0; in < n; ++in)
        for (int ic = 0; ic < c; ++ic)
            for (int iy = row_start; iy < row_end; ++iy)
                for (int ix = 0; ix < w; ++ix)
                    out.at(in, ic, iy - row_start, ix) = at(in, ic, iy, ix);
    return out;
}

Tensor Tensor::slice_cols(int col_start, int col_end) const {
    require(0 <= col_start && col_start < col_end && col_end <= w,
            "slice_cols: bad column range");
    Tensor out(n, c, h, col_end - col_start);
    for (int in = 0; in < n; ++in)
        for (int ic = 0; ic < c; ++ic)
            for (int iy = 0; iy < h; ++iy)
                for (int ix = col_start; ix < col_end; ++ix)
                    out.at(in, ic, iy, ix - col_start) = at(in, ic, iy, ix);
    return out;
}

void Region::validate(const std::string& who) const {
    if (!(0 <= row_start && row_start < row_end && row_end <= full_h) || full_w <= 0) {
        std::ostringstream os;
        os << who << ": invalid region [" << row_start << "," << row_end
           << ") of " << full_h << "x" << full_w;
        fail(os.str());
    }
}

// ---- convolution -----------------------------------------------------------

Tensor conv2d_region(const Tensor& x_full, const Region& region, const Tensor& weight,
                     std::span<const float> bias, int stride, int pad) {
    region.validate("conv2d_region");
    require(region.full_h == x_full.h && region.full_w == x_full.w,
            "conv2d_region: region does not match input " + x_full.shape_str());
    require(weight.h == weight.w && weight.h % 2 == 1, "conv2d: kernel must be square and odd");
    require(weight.c == x_full.c, "conv2d: weight expects c_in=" + std::to_string(weight.c) +
                                      ", input has c=" + std::to_string(x_full.c));
    require(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
    require(pad >= 0, "conv2d: negative padding");
    require(int(bias.size()) == weight.n, "conv2d: bias length != c_out");

    const int k = weight.h;
    const int out_h_full = (x_full.h + 2 * pad - k) / stride + 1;
    const int out_w = (x_full.w + 2 * pad - k) / stride + 1;
    require(out_h_full > 0 && out_w > 0, "conv2d: output would be empty");

    // Output rows whose sampling window anchors inside the input band.
    auto ceil_div = [](int a, int b) { return (a + b - 1) / b; };
    const int oy0 = std::min(ceil_div(region.row_start, stride), out_h_full);
    const int oy1 = std::min(ceil_div(region.row_end, stride), out_h_full);
    require(oy0 < oy1, "conv2d_region: region maps to no output rows");

    const int c_out = weight.n, c_in = weight.c;
    Tensor out(x_full.n, c_out, oy1 - oy0, out_w);

    const std::int64_t jobs = std::int64_t(x_full.n) * c_out * (oy1 - oy0);
#pragma omp parallel for schedule(static) if (jobs * out_w * c_in * k * k > kParallelCutoff)
    for (std::int64_t job = 0; job < jobs; ++job) {
        const int oy = int(job % (oy1 - oy0));
        const int co = int((job / (oy1 - oy0)) % c_out);
        const int in = int(job / ((oy1 - oy0) * std::int64_t(c_out)));
        const int iy0 = (oy + oy0) * stride - pad;
        for (int ox = 0; ox < out_w; ++ox) {
            const int ix0 = ox * stride - pad;
            double acc = 0.0;
            for (int ci = 0; ci < c_in; ++ci) {
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = iy0 + ky;
                    if (iy < 0 || iy >= x_full.h) continue;
                    for (int kx = 0; kx < k; ++kx) {
                        const int ix = ix0 + kx;
                        if (ix < 0 || ix >= x_full.w) continue;
                        acc += double(x_full.at(in, ci, iy, ix)) * double(weight.at(co, ci, ky, kx));
                    }
                }
            }
            out.at(in, co, oy, ox) = float(acc + double(bias[co]));
        }
    }
    return out;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, std::span<const float> bias,
              int stride, int pad) {
    return conv2d_region(x, full_region(x), weight, bias, stride, pad);
}

// ---- linear / attention ----------------------------------------------------

Tensor linear(const Tensor& tokens, const Tensor& weight, std::span<const float> bias) {
    require(tokens.c == 1 && tokens.n >= 1, "linear: expected token matrix (n,1,tokens,features)");
    require(weight.h == 1 && weight.w == 1, "linear: weight must be (out,in,1,1)");
    require(weight.c == tokens.w, "linear: weight expects in=" + std::to_string(weight.c) +
                                      ", tokens have " + std::to_string(tokens.w) + " features");
    require(int(bias.size()) == weight.n, "linear: bias length != out features");

    const int out_f = weight.n, in_f = weight.c, t = tokens.h;
    Tensor out(tokens.n, 1, t, out_f);
    const std::int64_t jobs = std::int64_t(tokens.n) * t;
#pragma omp parallel for schedule(static) if (jobs * out_f * in_f > kParallelCutoff)
    for (std::int64_t job = 0; job < jobs; ++job) {
        const int it = int(job % t);
        const int in = int(job / t);
        for (int o = 0; o < out_f; ++o) {
            double acc = 0.0;
            for (int i = 0; i < in_f; ++i)
                acc += double(tokens.at(in, 0, it, i)) * double(weight.at(o, i, 0, 0));
            out.at(in, 0, it, o) = float(acc + double(bias[o]));
        }
    }
    return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, float scale) {
    require(q.c == 1 && k.c == 1 && v.c == 1, "attention: expected token matrices");
    require(q.n == k.n && q.n == v.n, "attention: batch mismatch");
    require(q.w == k.w, "attention: query/key feature dims differ (" +
                            std::to_string(q.w) + " vs " + std::to_string(k.w) + ")");
    require(k.h == v.h, "attention: key/value token counts differ");

    const int m = q.h, s = k.h, d = q.w, dv = v.w;
    Tensor out(q.n, 1, m, dv);
    const std::int64_t jobs = std::int64_t(q.n) * m;
#pragma omp parallel for schedule(static) if (jobs * s * (d + dv) > kParallelCutoff)
    for (std::int64_t job = 0; job < jobs; ++job) {
        const int iq = int(job % m);
        const int in = int(job / m);
        std::vector<double> logits(s);
        double row_max = -std::numeric_limits<double>::infinity();
        for (int is = 0; is < s; ++is) {
            double acc = 0.0;
            for (int i = 0; i < d; ++i)
                acc += double(q.at(in, 0, iq, i)) * double(k.at(in, 0, is, i));
            logits[is] = acc * double(scale);
            row_max = std::max(row_max, logits[is]);
        }
        double denom = 0.0;
        for (int is = 0; is < s; ++is) {
            logits[is] = std::exp(logits[is] - row_max);
            denom += logits[is];
        }
        for (int o = 0; o < dv; ++o) {
            double acc = 0.0;
            for (int is = 0; is < s; ++is)
                acc += logits[is] * double(v.at(in, 0, is, o));
            out.at(in, 0, iq, o) = float(acc / denom);
        }
    }
    return out;
}

// ---- group normalization ---------------------------------------------------

GnStats group_stats(const Tensor& x, int groups, const std::optional<Region>& region) {
    require(groups > 0 && x.c % groups == 0,
            "group_stats: channels " + std::to_string(x.c) + " not divisible by groups " +
                std::to_string(groups));
    int y0 = 0, y1 = x.h;
    if (region) {
        region->validate("group_stats");
        require(region->full_h == x.h && region->full_w == x.w,
                "group_stats: region does not match input");
        y0 = region->row_start;
        y1 = region->row_end;
    }
    const int cpg = x.c / groups;
    GnStats st(x.n, groups);
    const std::int64_t jobs = std::int64_t(x.n) * groups;
#pragma omp parallel for schedule(static) if (jobs * cpg * (y1 - y0) * x.w > kParallelCutoff)
    for (std::int64_t job = 0; job < jobs; ++job) {
        const int g = int(job % groups);
        const int in = int(job / groups);
        double sum = 0.0, sum_sq = 0.0;
        for (int ic = g * cpg; ic < (g + 1) * cpg; ++ic)
            for (int iy = y0; iy < y1; ++iy)
                for (int ix = 0; ix < x.w; ++ix) {
                    const double v = x.at(in, ic, iy, ix);
                    sum += v;
                    sum_sq += v * v;
                }
        const double count = double(cpg) * (y1 - y0) * x.w;
        st.mean[job] = sum / count;
        st.mean_sq[job] = sum_sq / count;
    }
    return st;
}

Tensor group_norm_apply(const Tensor& x, const std::optional<Region>& region,
                        const GnStats& stats, std::span<const float> gamma,
                        std::span<const float> beta, float eps) {
    require(stats.samples == x.n && stats.groups > 0 && x.c % stats.groups == 0,
            "group_norm_apply: stats shape does not match input");
    require(int(gamma.size()) == x.c && int(beta.size()) == x.c,
            "group_norm_apply: gamma/beta length != channels");
    int y0 = 0, y1 = x.h;
    if (region) {
        region->validate("group_norm_apply");
        require(region->full_h == x.h && region->full_w == x.w,
                "group_norm_apply: region does not match input");
        y0 = region->row_start;
        y1 = region->row_end;
    }
    const int cpg = x.c / stats.groups;
    std::vector<double> inv_std(stats.entries());
    for (std::size_t e = 0; e < stats.entries(); ++e) {
        const double var = stats.mean_sq[e] - stats.mean[e] * stats.mean[e];
        if (var < 0.0) {
            throw std::runtime_error(
                "group_norm_apply: negative variance (caller must substitute fallback stats)");
        }
        inv_std[e] = 1.0 / std::sqrt(var + double(eps));
    }

    Tensor out = x;
    const std::int64_t jobs = std::int64_t(x.n) * x.c;
#pragma omp parallel for schedule(static) if (jobs * (y1 - y0) * x.w > kParallelCutoff)
    for (std::int64_t job = 0; job < jobs; ++job) {
        const int ic = int(job % x.c);
        const int in = int(job / x.c);
        const std::size_t e = std::size_t(in) * stats.groups + ic / cpg;
        const double mu = stats.mean[e], is = inv_std[e];
        const double g = gamma[ic], b = beta[ic];
        for (int iy = y0; iy < y1; ++iy)
            for (int ix = 0; ix < x.w; ++ix)
                out.at(in, ic, iy, ix) = float((double(x.at(in, ic, iy, ix)) - mu) * is * g + b);
    }
    return out;
}

// ---- scatter / elementwise -------------------------------------------------

Tensor scatter_region(const Tensor& stale_full, const Tensor& fresh, const Region& region) {
    region.validate("scatter_region");
    require(region.full_h == stale_full.h && region.full_w == stale_full.w,
            "scatter_region: region does not match stale tensor");
    require(fresh.n == stale_full.n && fresh.c == stale_full.c && fresh.w == stale_full.w &&
                fresh.h == region.rows(),
            "scatter_region: fresh extent " + fresh.shape_str() + " does not match region");
    Tensor out = stale_full;
    for (int in = 0; in < out.n; ++in)
        for (int ic = 0; ic < out.c; ++ic)
            for (int iy = 0; iy < fresh.h; ++iy)
                for (int ix = 0; ix < out.w; ++ix)
                    out.at(in, ic, region.row_start + iy, ix) = fresh.at(in, ic, iy, ix);
    return out;
}

Tensor silu(const Tensor& x) {
    Tensor out = x;
    const std::int64_t total = std::int64_t(x.size());
#pragma omp parallel for schedule(static) if (total > kParallelCutoff)
    for (std::int64_t i = 0; i < total; ++i) {
        const double v = x.data[i];
        out.data[i] = float(v / (1.0 + std::exp(-v)));
    }
    return out;
}

Tensor add(const Tensor& x, const Tensor& y) {
    require(x.same_shape(y), "add: shape mismatch " + x.shape_str() + " vs " + y.shape_str());
    Tensor out = x;
    const std::int64_t total = std::int64_t(x.size());
#pragma omp parallel for schedule(static) if (total > kParallelCutoff)
    for (std::int64_t i = 0; i < total; ++i) out.data[i] = x.data[i] + y.data[i];
    return out;
}

Tensor upsample_nearest2x(const Tensor& x) {
    Tensor out(x.n, x.c, 2 * x.h, 2 * x.w);
    const std::int64_t jobs = std::int64_t(x.n) * x.c * x.h;
#pragma omp parallel for schedule(static) if (jobs * x.w > kParallelCutoff)
    for (std::int64_t job = 0; job < jobs; ++job) {
        const int iy = int(job % x.h);
        const int ic = int((job / x.h) % x.c);
        const int in = int(job / (std::int64_t(x.h) * x.c));
        for (int ix = 0; ix < x.w; ++ix) {
            const float v = x.at(in, ic, iy, ix);
            out.at(in, ic, 2 * iy, 2 * ix) = v;
            out.at(in, ic, 2 * iy, 2 * ix + 1) = v;
            out.at(in, ic, 2 * iy + 1, 2 * ix) = v;
            out.at(in, ic, 2 * iy + 1, 2 * ix + 1) = v;
        }
    }
    return out;
}

double psnr(const Tensor& a, const Tensor& b, double peak) {
    require(a.same_shape(b), "psnr: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    require(peak > 0.0, "psnr: peak must be positive");
    double se = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = double(a.data[i]) - double(b.data[i]);
        se += d * d;
    }
    if (se == 0.0) return std::numeric_limits<double>::infinity();
    const double mse = se / double(a.size());
    return 10.0 * std::log10(peak * peak / mse);
}

// ---- token reshapes / random fill -------------------------------------------

Tensor to_tokens(const Tensor& x) {
    Tensor out(x.n, 1, x.h * x.w, x.c);
    for (int in = 0; in < x.n; ++in)
        for (int ic = 0; ic < x.c; ++ic)
            for (int iy = 0; iy < x.h; ++iy)
                for (int ix = 0; ix < x.w; ++ix)
                    out.at(in, 0, iy * x.w + ix, ic) = x.at(in, ic, iy, ix);
    return out;
}

Tensor from_tokens(const Tensor& tokens, int c, int h, int w) {
    require(tokens.c == 1 && tokens.w == c && tokens.h == h * w,
            "from_tokens: token matrix " + tokens.shape_str() + " does not reshape to (" +
                std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")");
    Tensor out(tokens.n, c, h, w);
    for (int in = 0; in < tokens.n; ++in)
        for (int ic = 0; ic < c; ++ic)
            for (int iy = 0; iy < h; ++iy)
                for (int ix = 0; ix < w; ++ix)
                    out.at(in, ic, iy, ix) = tokens.at(in, 0, iy * w + ix, ic);
    return out;
}

double GaussianRng::next() {
    if (have_spare) {
        have_spare = false;
        return spare;
    }
    // u1 in (0,1] so the log is finite.
    const double u1 = (double(rng.next() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = rng.next_unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare = r * std::sin(theta);
    have_spare = true;
    return r * std::cos(theta);
}

Tensor random_normal(int n, int c, int h, int w, uint64_t seed) {
    Tensor out(n, c, h, w);
    GaussianRng g(seed);
    for (auto& v : out.data) v = float(g.next());
    return out;
}

}  // namespace patchsim
