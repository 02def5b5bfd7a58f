#include "crowdctx/core/adam.hpp"

#include <cmath>

#include "crowdctx/core/errors.hpp"

namespace crowdctx {

void adam_step(ParameterStore& params, AdamState& state) {
    const auto& items = params.items();
    for (const auto& p : items) {
        if (!p.tensor.has_grad()) throw ContractError("parameter without gradient: " + p.name);
    }
    if (state.m.size() != items.size()) {
        state.m.clear();
        state.v.clear();
        for (const auto& p : items) {
            state.m.emplace_back(p.tensor.numel(), 0.0);
            state.v.emplace_back(p.tensor.numel(), 0.0);
        }
    }

    const auto& c = state.config;
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bias1 = 1.0 - std::pow(c.beta1, t);
    const double bias2 = 1.0 - std::pow(c.beta2, t);

    for (std::size_t k = 0; k < items.size(); ++k) {
        Tensor tensor = items[k].tensor;
        auto value = tensor.mutable_data();
        auto grad = tensor.mutable_grad();
        auto& m = state.m[k];
        auto& v = state.v[k];
        if (m.size() != value.size()) {
            throw ContractError("optimizer state shape mismatch for " + items[k].name);
        }
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double g = grad[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            const double mhat = m[i] / bias1;
            const double vhat = v[i] / bias2;
            value[i] -= c.lr * (mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * value[i]);
            if (c.float_state) {
                value[i] = round_to_float(value[i]);
                m[i] = round_to_float(m[i]);
                v[i] = round_to_float(v[i]);
            }
            grad[i] = 0.0;
        }
    }
}

}  // namespace crowdctx
