#include "serial_reference.hpp"

#include <cmath>
#include <cstddef>

namespace patchsim::ref {

Tensor conv2d_serial(const Tensor& x, const Tensor& weight, const std::vector<float>& bias,
                     int stride, int pad) {
    const int k = weight.h;
    const int out_h = (x.h + 2 * pad - k) / stride + 1;
    const int out_w = (x.w + 2 * pad - k) / stride + 1;
    Tensor out(x.n, weight.n, out_h, out_w);
    for (int in = 0; in < x.n; ++in)
        for (int co = 0; co < weight.n; ++co)
            for (int oy = 0; oy < out_h; ++oy)
                for (int ox = 0; ox < out_w; ++ox) {
                    double acc = bias[co];
                    for (int ci = 0; ci < x.c; ++ci)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * stride - pad + ky;
                                const int ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) continue;
                                acc += double(x.at(in, ci, iy, ix)) *
                                       double(weight.at(co, ci, ky, kx));
                            }
                    out.at(in, co, oy, ox) = float(acc);
                }
    return out;
}

Tensor matmul_serial(const Tensor& tokens, const Tensor& weight,
                     const std::vector<float>& bias) {
    Tensor out(tokens.n, 1, tokens.h, weight.n);
    for (int in = 0; in < tokens.n; ++in)
        for (int it = 0; it < tokens.h; ++it)
            for (int o = 0; o < weight.n; ++o) {
                double acc = bias[o];
                for (int i = 0; i < tokens.w; ++i)
                    acc += double(tokens.at(in, 0, it, i)) * double(weight.at(o, i, 0, 0));
                out.at(in, 0, it, o) = float(acc);
            }
    return out;
}

Tensor attention_serial(const Tensor& q, const Tensor& k, const Tensor& v, float scale) {
    Tensor out(q.n, 1, q.h, v.w);
    for (int in = 0; in < q.n; ++in)
        for (int iq = 0; iq < q.h; ++iq) {
            std::vector<double> w(k.h);
            double mx = -1e300;
            for (int is = 0; is < k.h; ++is) {
                double dot = 0.0;
                for (int i = 0; i < q.w; ++i)
                    dot += double(q.at(in, 0, iq, i)) * double(k.at(in, 0, is, i));
                w[is] = dot * scale;
                if (w[is] > mx) mx = w[is];
            }
            double denom = 0.0;
            for (int is = 0; is < k.h; ++is) {
                w[is] = std::exp(w[is] - mx);
                denom += w[is];
            }
            for (int o = 0; o < v.w; ++o) {
                double acc = 0.0;
                for (int is = 0; is < k.h; ++is) acc += w[is] * double(v.at(in, 0, is, o));
                out.at(in, 0, iq, o) = float(acc / denom);
            }
        }
    return out;
}

GnStats group_stats_serial(const Tensor& x, int groups) {
    const int cpg = x.c / groups;
    GnStats st(x.n, groups);
    for (int in = 0; in < x.n; ++in)
        for (int g = 0; g < groups; ++g) {
            double sum = 0.0, sum_sq = 0.0;
            for (int ic = g * cpg; ic < (g + 1) * cpg; ++ic)
                for (int iy = 0; iy < x.h; ++iy)
                    for (int ix = 0; ix < x.w; ++ix) {
                        const double val = x.at(in, ic, iy, ix);
                        sum += val;
                        sum_sq += val * val;
                    }
            const double count = double(cpg) * x.h * x.w;
            st.mean[std::size_t(in) * groups + g] = sum / count;
            st.mean_sq[std::size_t(in) * groups + g] = sum_sq / count;
        }
    return st;
}

Tensor group_norm_serial(const Tensor& x, const GnStats& stats, const std::vector<float>& gamma,
                         const std::vector<float>& beta, float eps) {
    const int cpg = x.c / stats.groups;
    Tensor out = x;
    for (int in = 0; in < x.n; ++in)
        for (int ic = 0; ic < x.c; ++ic) {
            const std::size_t e = std::size_t(in) * stats.groups + ic / cpg;
            const double mean = stats.mean[e];
            const double var = stats.mean_sq[e] - mean * mean;
            const double denom = std::sqrt(var + double(eps));
            for (int iy = 0; iy < x.h; ++iy)
                for (int ix = 0; ix < x.w; ++ix)
                    out.at(in, ic, iy, ix) =
                        float((double(x.at(in, ic, iy, ix)) - mean) / denom * gamma[ic] +
                              beta[ic]);
        }
    return out;
}

double mse_serial(const Tensor& a, const Tensor& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = double(a.data[i]) - double(b.data[i]);
        acc += d * d;
    }
    return acc / double(a.size());
}

}  // namespace patchsim::ref
