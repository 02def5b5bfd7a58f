#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace crowdctx {

struct GradRow {
    std::string name;
    double worst = 0.0;      // largest relative error seen (or largest |grad| for exact-zero rows)
    double threshold = 0.0;  // pass when worst < threshold (exact-zero rows: worst == 0)
    bool exact_zero = false;
    std::size_t checks = 0;
    std::size_t skipped = 0;  // difference stencils that crossed a relu / abs kink
    bool pass() const { return exact_zero ? worst == 0.0 : worst < threshold; }
};

struct GradSuiteOptions {
    bool primitives = true;
    bool end_to_end = true;
    bool structural = true;
    std::size_t weight_tensors = 8;  // sampled per end-to-end run, besides t_con and E
    std::size_t coords = 6;          // finite-difference coordinates per tensor
};

// Finite-difference checks of every primitive, the loss terms and the full
// objective on a small model, plus the exact-zero gradient probes.
std::vector<GradRow> run_gradient_suite(std::uint64_t seed, const GradSuiteOptions& options = {});

// Row-wise maximum over several seeds.
std::vector<GradRow> merge_rows(const std::vector<std::vector<GradRow>>& runs);

}  // namespace crowdctx
