#include "patchsim/model.hpp"
#include "patchsim/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace patchsim {

const char* layer_kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::Conv: return "Conv";
        case LayerKind::GroupNorm: return "GroupNorm";
        case LayerKind::SiLU: return "SiLU";
        case LayerKind::DownConv: return "DownConv";
        case LayerKind::Upsample: return "Upsample";
        case LayerKind::SelfAttn: return "SelfAttn";
        case LayerKind::CrossAttn: return "CrossAttn";
        case LayerKind::Linear: return "Linear";
        case LayerKind::AddSkip: return "AddSkip";
        case LayerKind::AddTimeEmb: return "AddTimeEmb";
    }
    return "?";
}

void ModelConfig::validate() const {
    if (in_channels <= 0 || base_channels <= 0 || cond_dim <= 0)
        throw std::invalid_argument("ModelConfig: channel/cond counts must be positive");
    if (levels < 1) throw std::invalid_argument("ModelConfig: levels must be >= 1");
    if (groups <= 0 || base_channels % groups != 0)
        throw std::invalid_argument("ModelConfig: base_channels must be divisible by groups");
    if (attn_level() < 0 || attn_level() >= levels)
        throw std::invalid_argument("ModelConfig: attn_at_level out of range");
}

// ---- construction ------------------------------------------------------------

namespace {

struct Builder {
    Model m;

    int level_ch(int level) const { return m.cfg.base_channels << level; }

    LayerDescriptor& push(LayerKind kind, int scale) {
        LayerDescriptor d;
        d.id = int(m.layers.size());
        d.kind = kind;
        d.scale_in = d.scale_out = scale;
        m.layers.push_back(d);
        return m.layers.back();
    }

    int alloc(Tensor t) {
        m.weights.push_back(std::move(t));
        return int(m.weights.size()) - 1;
    }

    void conv(LayerKind kind, int in_ch, int out_ch, int scale) {
        LayerDescriptor& d = push(kind, scale);
        d.in_ch = in_ch;
        d.out_ch = out_ch;
        d.kernel = 3;
        d.stride = (kind == LayerKind::DownConv) ? 2 : 1;
        d.pad = 1;
        if (kind == LayerKind::DownConv) d.scale_out = scale * 2;
        d.weight = alloc(Tensor(out_ch, in_ch, 3, 3));
        d.bias = alloc(Tensor(out_ch, 1, 1, 1));
    }

    void group_norm(int ch, int scale) {
        LayerDescriptor& d = push(LayerKind::GroupNorm, scale);
        d.in_ch = d.out_ch = ch;
        d.groups = m.cfg.groups;
        d.weight = alloc(Tensor(ch, 1, 1, 1));  // gamma
        d.bias = alloc(Tensor(ch, 1, 1, 1));    // beta
    }

    void silu(int ch, int scale) {
        LayerDescriptor& d = push(LayerKind::SiLU, scale);
        d.in_ch = d.out_ch = ch;
    }

    void time_emb(int ch, int scale) {
        LayerDescriptor& d = push(LayerKind::AddTimeEmb, scale);
        d.in_ch = d.out_ch = ch;
        d.weight = alloc(Tensor(ch, m.time_dim(), 1, 1));
        d.bias = alloc(Tensor(ch, 1, 1, 1));
    }

    void add_skip(int source, int ch, int scale) {
        LayerDescriptor& d = push(LayerKind::AddSkip, scale);
        d.in_ch = d.out_ch = ch;
        d.skip_source = source;
    }

    // [Conv3x3 -> GN -> SiLU -> AddTimeEmb] x2 plus a residual skip from the
    // block entry. Returns the id of the closing AddSkip.
    int res_block(int ch, int scale, int entry_id) {
        for (int rep = 0; rep < 2; ++rep) {
            conv(LayerKind::Conv, ch, ch, scale);
            group_norm(ch, scale);
            silu(ch, scale);
            time_emb(ch, scale);
        }
        add_skip(entry_id, ch, scale);
        return int(m.layers.size()) - 1;
    }

    void attn_block(int ch, int scale) {
        int pre = int(m.layers.size()) - 1;
        LayerDescriptor& sa = push(LayerKind::SelfAttn, scale);
        sa.in_ch = sa.out_ch = ch;
        add_skip(pre, ch, scale);

        pre = int(m.layers.size()) - 1;
        LayerDescriptor& ca = push(LayerKind::CrossAttn, scale);
        ca.in_ch = ca.out_ch = ch;
        ca.cond_dim = m.cfg.cond_dim;
        ca.weight = alloc(Tensor(ch, m.cfg.cond_dim, 1, 1));  // key projection
        ca.bias = alloc(Tensor(ch, 1, 1, 1));
        ca.weight2 = alloc(Tensor(ch, m.cfg.cond_dim, 1, 1));  // value projection
        ca.bias2 = alloc(Tensor(ch, 1, 1, 1));
        add_skip(pre, ch, scale);

        pre = int(m.layers.size()) - 1;
        LayerDescriptor& ff = push(LayerKind::Linear, scale);
        ff.in_ch = ff.out_ch = ch;
        ff.weight = alloc(Tensor(ch, ch, 1, 1));
        ff.bias = alloc(Tensor(ch, 1, 1, 1));
        add_skip(pre, ch, scale);
    }

    void upsample(int ch, int scale) {
        LayerDescriptor& d = push(LayerKind::Upsample, scale);
        d.in_ch = d.out_ch = ch;
        d.scale_out = scale / 2;
    }
};

double fan_in_of(const LayerDescriptor& d, int slot) {
    switch (d.kind) {
        case LayerKind::Conv:
        case LayerKind::DownConv:
            return double(d.in_ch) * d.kernel * d.kernel;
        case LayerKind::GroupNorm:
            return double(d.in_ch);
        case LayerKind::Linear:
            return double(d.in_ch);
        case LayerKind::AddTimeEmb:
            return slot <= 1 ? 0.0 : 0.0;  // filled in below via time_dim
        case LayerKind::CrossAttn:
            return double(d.cond_dim);
        default:
            return 1.0;
    }
}

void fill_weights(Model& m) {
    for (const LayerDescriptor& d : m.layers) {
        const int handles[4] = {d.weight, d.bias, d.weight2, d.bias2};
        for (int slot = 0; slot < 4; ++slot) {
            if (handles[slot] < 0) continue;
            double fan_in = fan_in_of(d, slot);
            if (d.kind == LayerKind::AddTimeEmb) fan_in = double(m.time_dim());
            const double s = 1.0 / std::sqrt(fan_in);
            SplitMix64 rng(substream_seed(m.seed, uint64_t(d.id), uint64_t(slot)));
            Tensor& t = m.weights[handles[slot]];
            const bool is_gamma = d.kind == LayerKind::GroupNorm && slot == 0;
            for (auto& v : t.data) {
                const double u = rng.next_uniform(-s, s);
                v = float(is_gamma ? 1.0 + u : u);
            }
        }
    }
}

}  // namespace

Model build_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Builder b;
    b.m.cfg = cfg;
    b.m.seed = seed;

    // Encoder: stem, then per level a residual block; stride-2 conv between
    // levels; self/cross attention and a token FFN after the chosen level.
    b.conv(LayerKind::Conv, cfg.in_channels, b.level_ch(0), 1);
    std::vector<int> encoder_exit(cfg.levels, -1);
    for (int level = 0; level < cfg.levels; ++level) {
        const int scale = 1 << level;
        const int entry = int(b.m.layers.size()) - 1;
        encoder_exit[level] = b.res_block(b.level_ch(level), scale, entry);
        if (level == cfg.attn_level()) {
            b.attn_block(b.level_ch(level), scale);
            encoder_exit[level] = int(b.m.layers.size()) - 1;
        }
        if (level + 1 < cfg.levels)
            b.conv(LayerKind::DownConv, b.level_ch(level), b.level_ch(level + 1), scale);
    }

    // Decoder mirrors with Upsample + Conv and a skip from the encoder exit.
    for (int level = cfg.levels - 2; level >= 0; --level) {
        const int scale = 1 << level;
        b.upsample(b.level_ch(level + 1), scale * 2);
        b.conv(LayerKind::Conv, b.level_ch(level + 1), b.level_ch(level), scale);
        b.add_skip(encoder_exit[level], b.level_ch(level), scale);
        const int entry = int(b.m.layers.size()) - 1;
        b.res_block(b.level_ch(level), scale, entry);
    }

    // Head: GN -> SiLU -> Conv back to the input channel count.
    b.group_norm(b.level_ch(0), 1);
    b.silu(b.level_ch(0), 1);
    b.conv(LayerKind::Conv, b.level_ch(0), cfg.in_channels, 1);

    fill_weights(b.m);
    return std::move(b.m);
}

std::vector<float> timestep_embedding(int t, int dim) {
    if (dim < 2 || dim % 2 != 0)
        throw std::invalid_argument("timestep_embedding: dim must be even and >= 2");
    std::vector<float> emb(dim);
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::pow(10000.0, -2.0 * i / double(dim));
        emb[i] = float(std::sin(t * freq));
        emb[half + i] = float(std::cos(t * freq));
    }
    return emb;
}

const std::vector<LayerDescriptor>& layer_graph(const Model& m) { return m.layers; }

// ---- shared per-layer operators ----------------------------------------------

Tensor layer_conv(const Model& m, const LayerDescriptor& d, const Tensor& ctx,
                  const Region& region) {
    return conv2d_region(ctx, region, m.weights[d.weight], m.weight_vec(d.bias), d.stride,
                         d.pad);
}

Tensor layer_self_attn(const LayerDescriptor& d, const Tensor& kv_spatial,
                       const Tensor& q_spatial) {
    const Tensor kv = to_tokens(kv_spatial);
    const Tensor q = to_tokens(q_spatial);
    const float scale = float(1.0 / std::sqrt(double(d.in_ch)));
    const Tensor out = attention(q, kv, kv, scale);
    return from_tokens(out, q_spatial.c, q_spatial.h, q_spatial.w);
}

std::pair<Tensor, Tensor> project_condition(const Model& m, const LayerDescriptor& d,
                                            const Condition& cond, int batch) {
    if (int(cond.values.size()) != d.cond_dim)
        throw std::invalid_argument("condition: expected " + std::to_string(d.cond_dim) +
                                    " values, got " + std::to_string(cond.values.size()));
    Tensor cond_tok(batch, 1, 1, d.cond_dim);
    for (int in = 0; in < batch; ++in)
        for (int i = 0; i < d.cond_dim; ++i) cond_tok.at(in, 0, 0, i) = cond.values[i];
    Tensor k = linear(cond_tok, m.weights[d.weight], m.weight_vec(d.bias));
    Tensor v = linear(cond_tok, m.weights[d.weight2], m.weight_vec(d.bias2));
    return {std::move(k), std::move(v)};
}

Tensor layer_cross_attn(const LayerDescriptor& d, const Tensor& x, const Tensor& cond_k,
                        const Tensor& cond_v) {
    const Tensor q = to_tokens(x);
    const float scale = float(1.0 / std::sqrt(double(d.in_ch)));
    const Tensor out = attention(q, cond_k, cond_v, scale);
    return from_tokens(out, x.c, x.h, x.w);
}

Tensor layer_linear(const Model& m, const LayerDescriptor& d, const Tensor& x) {
    const Tensor out = linear(to_tokens(x), m.weights[d.weight], m.weight_vec(d.bias));
    return from_tokens(out, x.c, x.h, x.w);
}

Tensor layer_time_emb(const Model& m, const LayerDescriptor& d, const Tensor& x,
                      std::span<const float> emb) {
    const Tensor& wt = m.weights[d.weight];
    const auto bias = m.weight_vec(d.bias);
    // Per-channel projection of the embedding, broadcast over space.
    std::vector<float> proj(d.out_ch);
    for (int o = 0; o < d.out_ch; ++o) {
        double acc = 0.0;
        for (int i = 0; i < int(emb.size()); ++i)
            acc += double(emb[i]) * double(wt.at(o, i, 0, 0));
        proj[o] = float(acc + double(bias[o]));
    }
    Tensor out = x;
    for (int in = 0; in < x.n; ++in)
        for (int ic = 0; ic < x.c; ++ic) {
            const float p = proj[ic];
            for (int iy = 0; iy < x.h; ++iy)
                for (int ix = 0; ix < x.w; ++ix) out.at(in, ic, iy, ix) = x.at(in, ic, iy, ix) + p;
        }
    return out;
}

// ---- full executor -----------------------------------------------------------

std::vector<Tensor> forward_collect(const Model& m, const Tensor& x, int t,
                                    const Condition& cond) {
    if (x.c != m.cfg.in_channels)
        throw std::invalid_argument("forward: input has " + std::to_string(x.c) +
                                    " channels, model expects " +
                                    std::to_string(m.cfg.in_channels));
    const int div = m.cfg.depth_divisor();
    if (x.h % div != 0 || x.w % div != 0)
        throw std::invalid_argument("forward: spatial dims " + x.shape_str() +
                                    " not divisible by " + std::to_string(div));

    const std::vector<float> emb = timestep_embedding(t, m.time_dim());
    std::vector<Tensor> outs;
    outs.reserve(m.layers.size());
    Tensor cur = x;
    Tensor cond_k, cond_v;
    for (const LayerDescriptor& d : m.layers) {
        switch (d.kind) {
            case LayerKind::Conv:
            case LayerKind::DownConv:
                cur = layer_conv(m, d, cur, full_region(cur));
                break;
            case LayerKind::GroupNorm: {
                const GnStats st = group_stats(cur, d.groups);
                cur = group_norm_apply(cur, {}, st, m.weight_vec(d.weight),
                                       m.weight_vec(d.bias), d.eps);
                break;
            }
            case LayerKind::SiLU:
                cur = silu(cur);
                break;
            case LayerKind::Upsample:
                cur = upsample_nearest2x(cur);
                break;
            case LayerKind::SelfAttn:
                cur = layer_self_attn(d, cur, cur);
                break;
            case LayerKind::CrossAttn: {
                if (cond_k.size() == 0) {
                    auto kv = project_condition(m, d, cond, cur.n);
                    cond_k = std::move(kv.first);
                    cond_v = std::move(kv.second);
                }
                cur = layer_cross_attn(d, cur, cond_k, cond_v);
                break;
            }
            case LayerKind::Linear:
                cur = layer_linear(m, d, cur);
                break;
            case LayerKind::AddSkip:
                cur = add(cur, outs[d.skip_source]);
                break;
            case LayerKind::AddTimeEmb:
                cur = layer_time_emb(m, d, cur, emb);
                break;
        }
        outs.push_back(cur);
    }
    return outs;
}

Tensor forward_full(const Model& m, const Tensor& x, int t, const Condition& cond) {
    return forward_collect(m, x, t, cond).back();
}

Condition random_condition(int dim, uint64_t seed) {
    Condition c;
    c.values.resize(dim);
    GaussianRng g(seed);
    for (auto& v : c.values) v = float(g.next());
    return c;
}

void zero_weights(Model& m, bool keep_biases) {
    for (const LayerDescriptor& d : m.layers) {
        if (d.weight >= 0)
            for (auto& v : m.weights[d.weight].data) v = 0.0f;
        if (d.weight2 >= 0)
            for (auto& v : m.weights[d.weight2].data) v = 0.0f;
        if (!keep_biases) {
            if (d.bias >= 0)
                for (auto& v : m.weights[d.bias].data) v = 0.0f;
            if (d.bias2 >= 0)
                for (auto& v : m.weights[d.bias2].data) v = 0.0f;
        }
    }
}

}  // namespace patchsim
