#include "crowdctx/layers.hpp"

#include <cmath>

#include "crowdctx/core/errors.hpp"

namespace crowdctx {

Linear::Linear(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out,
               Initializer& init, bool with_bias) {
    weight = store.add(prefix + ".weight", init.lecun({in, out}, in));
    if (with_bias) bias = store.add(prefix + ".bias", init.constant({out}, 0.0));
}

LayerNorm::LayerNorm(ParameterStore& store, const std::string& prefix, std::size_t dim) {
    gamma = store.add(prefix + ".gamma", Tensor::full({dim}, 1.0));
    beta = store.add(prefix + ".beta", Tensor::zeros({dim}));
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            std::vector<Tensor>* weights) {
    if (q.shape() != k.shape() || q.shape() != v.shape() || q.rank() != 2) {
        throw DimensionError("attention: q/k/v shapes " + shape_string(q.shape()) + ", " +
                             shape_string(k.shape()) + ", " + shape_string(v.shape()));
    }
    const std::size_t d = q.dim(1);
    if (heads == 0 || d % heads != 0) {
        throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " +
                             std::to_string(heads) + " heads");
    }
    const std::size_t head_dim = d / heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    if (heads == 1) {
        Tensor attn = ops::softmax_rows(ops::scale(ops::matmul(q, ops::transpose(k)), inv_scale));
        if (weights) weights->push_back(attn);
        return ops::matmul(attn, v);
    }
    std::vector<Tensor> outputs;
    outputs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t start = h * head_dim;
        Tensor qh = ops::slice_cols(q, start, head_dim);
        Tensor kh = ops::slice_cols(k, start, head_dim);
        Tensor vh = ops::slice_cols(v, start, head_dim);
        Tensor attn = ops::softmax_rows(ops::scale(ops::matmul(qh, ops::transpose(kh)), inv_scale));
        if (weights) weights->push_back(attn);
        outputs.push_back(ops::matmul(attn, vh));
    }
    return ops::concat_cols(outputs);
}

}  // namespace crowdctx
