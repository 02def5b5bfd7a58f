#pragma once

#include <string>
#include <vector>

#include "crowdctx/core/ops.hpp"
#include "crowdctx/core/parameters.hpp"

namespace crowdctx {

// x[n, in] @ w[in, out] + b[out]
struct Linear {
    Tensor weight;
    Tensor bias;  // empty when built without bias

    Linear() = default;
    Linear(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out,
           Initializer& init, bool with_bias = true);

    Tensor operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }
};

struct LayerNorm {
    Tensor gamma;
    Tensor beta;

    LayerNorm() = default;
    LayerNorm(ParameterStore& store, const std::string& prefix, std::size_t dim);

    Tensor operator()(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }
};

// Scaled dot-product attention split over `heads` column groups of q, k, v
// (each [n, d]). Scores are scaled by 1/sqrt(d / heads). When `weights` is
// non-null the per-head [n, n] attention matrices are appended to it.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            std::vector<Tensor>* weights = nullptr);

}  // namespace crowdctx
