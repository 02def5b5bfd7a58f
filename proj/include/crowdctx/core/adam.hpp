#pragma once

#include <cstdint>
#include <vector>

#include "crowdctx/core/parameters.hpp"

namespace crowdctx {

struct AdamConfig {
    double lr = 1e-5;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    // Round parameters and moments to float after every update so that the
    // single-precision checkpoint holds the exact training state.
    bool float_state = true;
};

struct AdamState {
    AdamConfig config;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> m;  // aligned with ParameterStore::items()
    std::vector<std::vector<double>> v;

    explicit AdamState(AdamConfig cfg = {}) : config(cfg) {}
};

// One Adam update with decoupled weight decay, then zeroes every gradient.
// Throws ContractError if a registered parameter has no gradient buffer.
void adam_step(ParameterStore& params, AdamState& state);

}  // namespace crowdctx
