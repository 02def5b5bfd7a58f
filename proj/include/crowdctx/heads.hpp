#pragma once

#include <string>

#include "crowdctx/layers.hpp"

namespace crowdctx {

// Token-attention module: re-weights a convolved copy of the patch feature
// map channel by channel with a sigmoid gate computed from the context
// feature, then adds it back onto the input.
class TokenAttention {
public:
    TokenAttention(ParameterStore& store, const std::string& prefix, std::size_t channels,
                   std::size_t reduction, Initializer& init);

    // sigmoid(MLP(F_c)); every component lies in (0, 1).
    Tensor gate(const Tensor& context) const;
    // F_p + conv(F_p) * gate[c]. `gate` may be any [d] tensor, which lets
    // tests inject values outside the sigmoid range.
    Tensor recalibrate(const Tensor& patch_map, const Tensor& gate) const;
    // conv(F_p), the branch that the gate scales.
    Tensor prepare(const Tensor& patch_map) const;

private:
    std::size_t channels_;
    Linear fc1_, fc2_;
    Tensor conv_weight_;  // [d, d, 3, 3]
    Tensor conv_bias_;
};

// Regression-token module: two-layer MLP from F_c to a scalar count.
class CountRegressor {
public:
    CountRegressor(ParameterStore& store, const std::string& prefix, std::size_t dim,
                   std::size_t hidden, Initializer& init);

    Tensor predict(const Tensor& context) const;  // scalar

private:
    Linear fc1_, fc2_;
};

// Two transposed-convolution upsampling stages, then a 1x1 convolution to one
// channel and a ReLU. Each stage doubles resolution while the remaining
// upsampling factor allows it, otherwise keeps it.
class DensityDecoder {
public:
    DensityDecoder(ParameterStore& store, const std::string& prefix, std::size_t channels,
                   std::size_t upsample, Initializer& init);

    // features[d, h, w] -> density [h * upsample, w * upsample], all >= 0.
    Tensor decode(const Tensor& features) const;

    std::size_t upsample() const { return upsample_; }

private:
    struct Stage {
        Tensor weight;
        Tensor bias;
        std::size_t kernel, stride, pad;
    };
    std::size_t channels_;
    std::size_t upsample_;
    Stage up1_, up2_;
    Tensor out_weight_;  // [1, c, 1, 1]
    Tensor out_bias_;
};

}  // namespace crowdctx
