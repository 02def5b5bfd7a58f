#pragma once

#include <array>
#include <string>
#include <vector>

#include "crowdctx/layers.hpp"

namespace crowdctx {

// Sliding-window split: k x k window, stride s (< k so windows overlap),
// zero padding p on every side.
struct SplitSpec {
    std::size_t k = 3;
    std::size_t s = 2;
    std::size_t p = 1;

    // Throws ContractError unless k, s >= 1 and s < k.
    void validate() const;
    ops::WindowGeometry grid(std::size_t h, std::size_t w) const {
        return ops::window_geometry(h, w, k, s, p);
    }
    bool operator==(const SplitSpec&) const = default;
};

// Token sequence plus the 2-D grid it was read from (row-major).
struct TokenGrid {
    Tensor tokens;  // [grid_h * grid_w, dim]
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;

    std::size_t length() const { return grid_h * grid_w; }
    std::size_t dim() const { return tokens.dim(1); }
    // [dim, grid_h, grid_w]; the inverse of from_map.
    Tensor to_map() const;
    static TokenGrid from_map(const Tensor& map);
};

TokenGrid overlapping_split(const Tensor& x, const SplitSpec& spec);

struct TokenizerConfig {
    std::array<SplitSpec, 3> stages{SplitSpec{7, 4, 3}, SplitSpec{3, 2, 1}, SplitSpec{3, 2, 1}};
    std::size_t reduction_dim = 64;
    std::size_t final_dim = 64;

    void validate() const;
};

struct GridSize {
    std::size_t h = 0;
    std::size_t w = 0;
    bool operator==(const GridSize&) const = default;
};

// Grid after each of the three splits for an h x w input. Throws
// DimensionError naming the stage that cannot fit its window.
std::array<GridSize, 3> stage_grids(std::size_t h, std::size_t w, const TokenizerConfig& cfg);

// One transformer layer inside tokens reduction. Width changes from in_dim to
// out_dim at the value projection, which also carries the attention residual.
class ReductionLayer {
public:
    ReductionLayer(ParameterStore& store, const std::string& prefix, std::size_t in_dim,
                   std::size_t out_dim, Initializer& init);

    // `attention` (optional) receives the [N, N] attention matrix.
    TokenGrid forward(const TokenGrid& z, Tensor* attention = nullptr) const;

    std::size_t in_dim() const { return in_dim_; }
    std::size_t out_dim() const { return out_dim_; }

private:
    std::size_t in_dim_;
    std::size_t out_dim_;
    LayerNorm norm1_;
    Linear wq_, wk_, wv_, proj_;
    LayerNorm norm2_;
    Linear fc1_, fc2_;
};

// split -> reduce -> split -> reduce -> split -> project.
class Tokenizer {
public:
    Tokenizer(ParameterStore& store, const std::string& prefix, const TokenizerConfig& cfg,
              std::size_t in_channels, Initializer& init);

    TokenGrid forward(const Tensor& image) const;

    const TokenizerConfig& config() const { return cfg_; }
    const ReductionLayer& reduction(std::size_t i) const { return reductions_.at(i); }
    // Overall pixel stride of the final token grid.
    std::size_t total_stride() const;

private:
    TokenizerConfig cfg_;
    std::size_t in_channels_;
    std::vector<ReductionLayer> reductions_;
    Linear project_;
};

}  // namespace crowdctx
