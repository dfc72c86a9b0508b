#pragma once

#include "patchsim/tensor.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace patchsim {

// Toy U-Net noise predictor. Fixed architecture, seed-deterministic weights,
// expressed as a flat layer graph the runtimes execute in id order.

enum class LayerKind : uint8_t {
    Conv,
    GroupNorm,
    SiLU,
    DownConv,
    Upsample,
    SelfAttn,
    CrossAttn,
    Linear,
    AddSkip,
    AddTimeEmb,
};

const char* layer_kind_name(LayerKind kind);

struct ModelConfig {
    int in_channels = 4;
    int base_channels = 16;
    int levels = 3;       // spatial /1, /2, /4 by default
    int groups = 4;       // GroupNorm groups
    int cond_dim = 8;
    int attn_at_level = -1;  // -1 = deepest level

    int attn_level() const { return attn_at_level < 0 ? levels - 1 : attn_at_level; }
    int depth_divisor() const { return 1 << (levels - 1); }
    void validate() const;  // throws std::invalid_argument
};

// One node of the denoiser graph. Executed in id order; each layer consumes
// the previous layer's output, AddSkip additionally reads outs[skip_source].
struct LayerDescriptor {
    int id = -1;
    LayerKind kind{};
    int in_ch = 0, out_ch = 0;
    int kernel = 0, stride = 1, pad = 0;  // Conv / DownConv
    int groups = 0;                       // GroupNorm
    float eps = 1e-5f;                    // GroupNorm
    int cond_dim = 0;                     // CrossAttn
    int skip_source = -1;                 // AddSkip
    int scale_in = 1;                     // spatial divisor at the layer input
    int scale_out = 1;                    // spatial divisor at the layer output
    // weight-pool handles (-1 when the layer has no such slot)
    int weight = -1, bias = -1;    // slot 0 / 1
    int weight2 = -1, bias2 = -1;  // slot 2 / 3 (CrossAttn value projection)

    // Layers whose operator reads beyond the device's fresh rows; their
    // full-shape inputs are cached and exchanged between steps.
    bool needs_gather() const {
        return kind == LayerKind::Conv || kind == LayerKind::DownConv ||
               kind == LayerKind::SelfAttn;
    }
    bool has_macs() const {
        return kind == LayerKind::Conv || kind == LayerKind::DownConv ||
               kind == LayerKind::Linear || kind == LayerKind::SelfAttn ||
               kind == LayerKind::CrossAttn;
    }
};

// Text-condition stand-in.
struct Condition {
    std::vector<float> values;
};

struct Model {
    ModelConfig cfg;
    uint64_t seed = 0;
    std::vector<LayerDescriptor> layers;
    std::vector<Tensor> weights;  // pool addressed by descriptor handles

    int time_dim() const { return 2 * cfg.base_channels; }
    std::span<const float> weight_vec(int handle) const { return weights[handle].data; }
};

Model build_model(const ModelConfig& cfg, uint64_t seed);

// Half sin, half cos of t / 10000^(2i/dim).
std::vector<float> timestep_embedding(int t, int dim);

const std::vector<LayerDescriptor>& layer_graph(const Model& m);

// Full (non-region) forward pass; output shape equals input shape.
Tensor forward_full(const Model& m, const Tensor& x, int t, const Condition& cond);

// Same pass, returning every layer's output (outs.back() == forward_full).
std::vector<Tensor> forward_collect(const Model& m, const Tensor& x, int t,
                                    const Condition& cond);

// ---- shared per-layer operators --------------------------------------------
// Both the full executor and the per-device region executor call these, so an
// N=1 patch run is bit-identical to forward_full.

// Conv/DownConv over ctx (full map); region selects the output band.
Tensor layer_conv(const Model& m, const LayerDescriptor& d, const Tensor& ctx,
                  const Region& region);
// Gram self-attention: queries from q_spatial, keys/values from kv_spatial.
Tensor layer_self_attn(const LayerDescriptor& d, const Tensor& kv_spatial,
                       const Tensor& q_spatial);
// Single-token cross-attention against the projected condition (k/v tokens
// shaped (n,1,1,c), replicated per sample).
Tensor layer_cross_attn(const LayerDescriptor& d, const Tensor& x,
                        const Tensor& cond_k, const Tensor& cond_v);
// Projects the condition once per run: returns {k_tokens, v_tokens}.
std::pair<Tensor, Tensor> project_condition(const Model& m, const LayerDescriptor& d,
                                            const Condition& cond, int batch);
Tensor layer_linear(const Model& m, const LayerDescriptor& d, const Tensor& x);
Tensor layer_time_emb(const Model& m, const LayerDescriptor& d, const Tensor& x,
                      std::span<const float> emb);

// Condition drawn from a seeded standard-normal stream.
Condition random_condition(int dim, uint64_t seed);

// Test fixture: zero every weight tensor, optionally keeping biases.
void zero_weights(Model& m, bool keep_biases);

}  // namespace patchsim
