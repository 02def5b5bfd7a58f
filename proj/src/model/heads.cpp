#include "crowdctx/heads.hpp"

#include <algorithm>

#include "crowdctx/core/errors.hpp"

namespace crowdctx {

TokenAttention::TokenAttention(ParameterStore& store, const std::string& prefix, std::size_t channels,
                               std::size_t reduction, Initializer& init)
    : channels_(channels) {
    if (reduction == 0) throw ContractError("TAM reduction ratio must be positive");
    const std::size_t hidden = std::max<std::size_t>(1, channels / reduction);
    fc1_ = Linear(store, prefix + ".gate_fc1", channels, hidden, init);
    fc2_ = Linear(store, prefix + ".gate_fc2", hidden, channels, init);
    conv_weight_ = store.add(prefix + ".conv.weight", init.lecun({channels, channels, 3, 3}, channels * 9));
    conv_bias_ = store.add(prefix + ".conv.bias", init.constant({channels}, 0.0));
}

Tensor TokenAttention::gate(const Tensor& context) const {
    Tensor x = ops::reshape(context, {1, context.numel()});
    return ops::reshape(ops::sigmoid(fc2_(ops::relu(fc1_(x)))), {channels_});
}

Tensor TokenAttention::prepare(const Tensor& patch_map) const {
    return ops::conv2d(patch_map, conv_weight_, conv_bias_, 1, 1);
}

Tensor TokenAttention::recalibrate(const Tensor& patch_map, const Tensor& gate) const {
    if (patch_map.rank() != 3 || patch_map.dim(0) != channels_ || gate.numel() != channels_) {
        throw DimensionError("TAM expects a [" + std::to_string(channels_) + ", h, w] map and a gate of " +
                             std::to_string(channels_) + ", got " + shape_string(patch_map.shape()) +
                             " and " + shape_string(gate.shape()));
    }
    return ops::add(patch_map, ops::mul_channels(prepare(patch_map), gate));
}

CountRegressor::CountRegressor(ParameterStore& store, const std::string& prefix, std::size_t dim,
                               std::size_t hidden, Initializer& init)
    : fc1_(store, prefix + ".fc1", dim, hidden, init), fc2_(store, prefix + ".fc2", hidden, 1, init) {}

Tensor CountRegressor::predict(const Tensor& context) const {
    Tensor x = ops::reshape(context, {1, context.numel()});
    return ops::reshape(fc2_(ops::relu(fc1_(x))), {});
}

DensityDecoder::DensityDecoder(ParameterStore& store, const std::string& prefix, std::size_t channels,
                               std::size_t upsample, Initializer& init)
    : channels_(channels), upsample_(upsample) {
    if (upsample != 1 && upsample != 2 && upsample != 4) {
        throw ConfigError("decoder upsampling factor must be 1, 2 or 4, got " + std::to_string(upsample));
    }
    const std::size_t c1 = std::max<std::size_t>(1, channels / 2);
    const std::size_t c2 = std::max<std::size_t>(1, channels / 4);
    auto make_stage = [&](const std::string& name, std::size_t in, std::size_t out, bool doubles) {
        Stage s;
        // k4 s2 p1 doubles the grid; k3 s1 p1 keeps it.
        s.kernel = doubles ? 4 : 3;
        s.stride = doubles ? 2 : 1;
        s.pad = 1;
        // Each output pixel of a stride-2 k4 deconvolution receives in * 4 taps.
        const std::size_t fan_in = in * (doubles ? 4 : 9);
        s.weight = store.add(prefix + "." + name + ".weight", init.lecun({in, out, s.kernel, s.kernel}, fan_in));
        s.bias = store.add(prefix + "." + name + ".bias", init.constant({out}, 0.0));
        return s;
    };
    up1_ = make_stage("up1", channels, c1, upsample >= 2);
    up2_ = make_stage("up2", c1, c2, upsample >= 4);
    out_weight_ = store.add(prefix + ".out.weight", init.lecun({1, c2, 1, 1}, c2));
    out_bias_ = store.add(prefix + ".out.bias", init.constant({1}, 0.0));
}

Tensor DensityDecoder::decode(const Tensor& features) const {
    if (features.rank() != 3 || features.dim(0) != channels_) {
        throw DimensionError("decoder expects [" + std::to_string(channels_) + ", h, w], got " +
                             shape_string(features.shape()));
    }
    Tensor x = ops::relu(ops::conv_transpose2d(features, up1_.weight, up1_.bias, up1_.stride, up1_.pad));
    x = ops::relu(ops::conv_transpose2d(x, up2_.weight, up2_.bias, up2_.stride, up2_.pad));
    x = ops::relu(ops::conv2d(x, out_weight_, out_bias_, 1, 0));
    return ops::reshape(x, {x.dim(1), x.dim(2)});
}

}  // namespace crowdctx
