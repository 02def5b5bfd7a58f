#pragma once

#include <map>
#include <string>
#include <vector>

#include "crowdctx/layers.hpp"
#include "crowdctx/tokenizer.hpp"

namespace crowdctx {

struct BackboneConfig {
    std::size_t d = 64;
    std::size_t layers = 4;
    std::size_t heads = 4;
    double mlp_ratio = 2.0;
    // 1-based layer indices whose patch tokens feed auxiliary decoders.
    std::vector<std::size_t> taps = default_taps(4);

    void validate() const;

    // {5, 8, 11} at depth 14, scaled proportionally (rounded, deduplicated)
    // for other depths.
    static std::vector<std::size_t> default_taps(std::size_t layers);
};

// T0 = [T; t_con] + E. Throws DimensionError when E does not have N + 1 rows
// of T's width.
Tensor append_context(const TokenGrid& tokens, const Tensor& context_token, const Tensor& position);

// Pre-norm residual block: x + Attn(LN(x)), then x + MLP(LN(x)) with GELU.
class EncoderLayer {
public:
    EncoderLayer(ParameterStore& store, const std::string& prefix, const BackboneConfig& cfg,
                 Initializer& init);

    // `attention` (optional) receives one [N+1, N+1] matrix per head.
    Tensor forward(const Tensor& x, std::vector<Tensor>* attention = nullptr) const;

private:
    std::size_t heads_;
    LayerNorm norm1_;
    Linear wq_, wk_, wv_, proj_;
    LayerNorm norm2_;
    Linear fc1_, fc2_;
};

struct Encoded {
    Tensor patch_features;               // F_p [N, d]
    Tensor context_feature;              // F_c [d]
    std::map<std::size_t, Tensor> taps;  // layer -> [N, d]
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    // True when the position embedding was resampled to an unseen grid.
    bool resampled_positions = false;

    // F_p as a [d, grid_h, grid_w] map.
    Tensor patch_map() const;
    Tensor tap_map(std::size_t layer) const;
};

class Backbone {
public:
    // grid_h x grid_w is the token grid the position embedding is sized for.
    Backbone(ParameterStore& store, const std::string& prefix, const BackboneConfig& cfg,
             std::size_t grid_h, std::size_t grid_w, Initializer& init);

    Encoded encode(const TokenGrid& tokens, std::vector<std::vector<Tensor>>* attention = nullptr) const;

    // E resized to a grid_h x grid_w patch layout (context row kept as is).
    Tensor position_for(std::size_t grid_h, std::size_t grid_w) const;

    const BackboneConfig& config() const { return cfg_; }
    const Tensor& context_token() const { return context_token_; }
    const Tensor& position() const { return position_; }

private:
    BackboneConfig cfg_;
    std::size_t grid_h_;
    std::size_t grid_w_;
    Tensor context_token_;  // [1, d]
    Tensor position_;       // [N + 1, d]
    std::vector<EncoderLayer> layers_;
};

}  // namespace crowdctx
