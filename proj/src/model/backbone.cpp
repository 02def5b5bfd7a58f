#include "crowdctx/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "crowdctx/core/errors.hpp"

namespace crowdctx {

void BackboneConfig::validate() const {
    if (d == 0 || heads == 0 || d % heads != 0) {
        throw ContractError("backbone width " + std::to_string(d) + " must be divisible by " +
                            std::to_string(heads) + " heads");
    }
    if (mlp_ratio <= 0.0) throw ContractError("mlp_ratio must be positive");
    for (auto t : taps) {
        if (t < 1 || t > layers) {
            throw ContractError("tap layer " + std::to_string(t) + " outside [1, " +
                                std::to_string(layers) + "]");
        }
    }
}

std::vector<std::size_t> BackboneConfig::default_taps(std::size_t layers) {
    std::vector<std::size_t> taps;
    if (layers < 2) return taps;
    for (double t : {5.0, 8.0, 11.0}) {
        auto layer = static_cast<std::size_t>(std::lround(t * static_cast<double>(layers) / 14.0));
        layer = std::clamp<std::size_t>(layer, 1, layers - 1);
        if (std::find(taps.begin(), taps.end(), layer) == taps.end()) taps.push_back(layer);
    }
    return taps;
}

Tensor append_context(const TokenGrid& tokens, const Tensor& context_token, const Tensor& position) {
    const std::size_t n = tokens.length();
    const std::size_t d = tokens.dim();
    if (position.rank() != 2 || position.dim(0) != n + 1 || position.dim(1) != d) {
        throw DimensionError("position embedding " + shape_string(position.shape()) + " does not match " +
                             std::to_string(n) + " tokens of width " + std::to_string(d));
    }
    if (context_token.numel() != d) {
        throw DimensionError("context token has " + std::to_string(context_token.numel()) +
                             " values, tokens have width " + std::to_string(d));
    }
    Tensor ctx = ops::reshape(context_token, {1, d});
    return ops::add(ops::concat_rows({tokens.tokens, ctx}), position);
}

EncoderLayer::EncoderLayer(ParameterStore& store, const std::string& prefix, const BackboneConfig& cfg,
                           Initializer& init)
    : heads_(cfg.heads),
      norm1_(store, prefix + ".norm1", cfg.d),
      wq_(store, prefix + ".wq", cfg.d, cfg.d, init, false),
      wk_(store, prefix + ".wk", cfg.d, cfg.d, init, false),
      wv_(store, prefix + ".wv", cfg.d, cfg.d, init, false),
      proj_(store, prefix + ".proj", cfg.d, cfg.d, init),
      norm2_(store, prefix + ".norm2", cfg.d) {
    const auto hidden = static_cast<std::size_t>(std::lround(cfg.mlp_ratio * static_cast<double>(cfg.d)));
    fc1_ = Linear(store, prefix + ".fc1", cfg.d, hidden, init);
    fc2_ = Linear(store, prefix + ".fc2", hidden, cfg.d, init);
}

Tensor EncoderLayer::forward(const Tensor& x, std::vector<Tensor>* attention) const {
    Tensor h = norm1_(x);
    Tensor y = ops::add(x, proj_(multi_head_attention(wq_(h), wk_(h), wv_(h), heads_, attention)));
    return ops::add(y, fc2_(ops::gelu(fc1_(norm2_(y)))));
}

Tensor Encoded::patch_map() const { return TokenGrid{patch_features, grid_h, grid_w}.to_map(); }

Tensor Encoded::tap_map(std::size_t layer) const {
    return TokenGrid{taps.at(layer), grid_h, grid_w}.to_map();
}

Backbone::Backbone(ParameterStore& store, const std::string& prefix, const BackboneConfig& cfg,
                   std::size_t grid_h, std::size_t grid_w, Initializer& init)
    : cfg_(cfg), grid_h_(grid_h), grid_w_(grid_w) {
    cfg_.validate();
    context_token_ = store.add(prefix + ".context_token", init.normal({1, cfg_.d}, 0.02));
    position_ = store.add(prefix + ".position", init.normal({grid_h * grid_w + 1, cfg_.d}, 0.02));
    layers_.reserve(cfg_.layers);
    for (std::size_t i = 0; i < cfg_.layers; ++i) {
        layers_.emplace_back(store, prefix + ".layer" + std::to_string(i + 1), cfg_, init);
    }
}

Tensor Backbone::position_for(std::size_t grid_h, std::size_t grid_w) const {
    if (grid_h == grid_h_ && grid_w == grid_w_) return position_;
    const std::size_t n = grid_h_ * grid_w_;
    Tensor patch_rows = ops::slice_rows(position_, 0, n);
    Tensor map = TokenGrid{patch_rows, grid_h_, grid_w_}.to_map();
    Tensor resized = TokenGrid::from_map(ops::resize_bilinear(map, grid_h, grid_w)).tokens;
    return ops::concat_rows({resized, ops::slice_rows(position_, n, 1)});
}

Encoded Backbone::encode(const TokenGrid& tokens, std::vector<std::vector<Tensor>>* attention) const {
    if (tokens.dim() != cfg_.d) {
        throw DimensionError("backbone expects width " + std::to_string(cfg_.d) + ", got " +
                             std::to_string(tokens.dim()));
    }
    Encoded out;
    out.grid_h = tokens.grid_h;
    out.grid_w = tokens.grid_w;
    out.resampled_positions = tokens.grid_h != grid_h_ || tokens.grid_w != grid_w_;
    const std::size_t n = tokens.length();

    Tensor x = append_context(tokens, context_token_, position_for(tokens.grid_h, tokens.grid_w));
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        std::vector<Tensor>* sink = nullptr;
        if (attention) sink = &attention->emplace_back();
        x = layers_[i].forward(x, sink);
        const std::size_t layer = i + 1;
        if (std::find(cfg_.taps.begin(), cfg_.taps.end(), layer) != cfg_.taps.end()) {
            out.taps.emplace(layer, ops::slice_rows(x, 0, n));
        }
    }
    out.patch_features = ops::slice_rows(x, 0, n);
    out.context_feature = ops::reshape(ops::slice_rows(x, n, 1), {cfg_.d});
    return out;
}

}  // namespace crowdctx
