#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "crowdctx/core/tensor.hpp"

namespace crowdctx {

struct GradCheckOptions {
    double step = 1e-5;
    // Coordinates probed per input; 0 probes every coordinate.
    std::size_t max_coords = 0;
    std::uint64_t seed = 0;
    // Denominator floor: gradients whose norms are both below this compare
    // in absolute terms.
    double floor = 1e-8;
    // Reject coordinates whose +-step stencil changes the relu / abs sign
    // pattern (the difference quotient straddles a kink) and draw the next.
    bool skip_kinks = false;
};

struct GradCheckResult {
    double relative_error = 0.0;  // ||ad - fd|| / max(||ad||, ||fd||, floor)
    double autodiff_norm = 0.0;
    double numeric_norm = 0.0;
    std::size_t coords = 0;
    std::size_t skipped = 0;  // coordinates rejected by skip_kinks
};

// Central finite differences of a scalar-valued function against the
// reverse-mode gradient with respect to `input` (a leaf that requires grad).
GradCheckResult check_gradient(const std::function<Tensor()>& loss_fn, Tensor input,
                               const GradCheckOptions& options = {});

}  // namespace crowdctx
