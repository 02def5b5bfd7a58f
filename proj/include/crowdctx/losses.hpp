#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "crowdctx/core/tensor.hpp"

namespace crowdctx {

struct LossWeights {
    double rtm = 0.1;  // lambda: regression-token loss
    double ot = 0.1;   // lambda_1
    double tv = 0.01;  // lambda_2
    double aux = 1.0;  // weight of each auxiliary density loss
    bool tv_scale_by_count = true;

    void validate() const;
};

struct SinkhornConfig {
    double epsilon = 0.01;
    int max_iters = 200;
    // Stop once the row-marginal L1 error falls below tol (0 never stops early).
    double tol = 1e-7;

    void validate() const;
};

// Squared Euclidean distance between cell centres of an h x w grid, divided
// by the squared grid diagonal (cells are unit squares). A 1x1 grid has an
// all-zero cost.
Tensor cost_matrix(std::size_t h, std::size_t w);

struct SinkhornResult {
    std::vector<double> plan;  // n x n row-major
    int iterations = 0;
    double marginal_error = 0.0;            // row-marginal L1 error at exit
    std::vector<double> marginal_history;   // error before each update after the first
    double transport_cost = 0.0;            // <C, P>
};

// Log-domain Sinkhorn on the kernel exp(-C / epsilon). a and b must be
// nonnegative and each sum to 1 within 1e-9 (ContractError otherwise).
SinkhornResult sinkhorn_plan(std::span<const double> a, std::span<const double> b, const Tensor& cost,
                             const SinkhornConfig& cfg);

// Reusable geometry of an h x w loss grid: the dense cost plus a separable
// kernel factorization used when the kernel's dynamic range fits in double.
class TransportGrid {
public:
    TransportGrid(std::size_t h, std::size_t w);

    std::size_t h() const { return h_; }
    std::size_t w() const { return w_; }
    std::size_t size() const { return h_ * w_; }
    const Tensor& cost() const { return cost_; }
    double axis_cost(std::size_t d) const { return static_cast<double>(d * d) / diag2_; }

private:
    std::size_t h_, w_;
    double diag2_;
    Tensor cost_;
};

// <C, P> for the entropic plan between probability vectors a and b laid out
// on `grid`. Differentiable in both inputs by reverse-mode through every
// Sinkhorn iteration that ran.
Tensor entropic_transport_cost(const Tensor& a, const Tensor& b, const TransportGrid& grid,
                               const SinkhornConfig& cfg, SinkhornResult* info = nullptr);

// |sum(pred) - sum(gt)|
Tensor count_loss(const Tensor& pred, const Tensor& gt);
// Entropic OT between the normalized maps; 0 when either map has no mass.
Tensor ot_loss(const Tensor& pred, const Tensor& gt, const SinkhornConfig& cfg,
               const TransportGrid* grid = nullptr);
// ||gt||_1 * 0.5 * || pred/||pred|| - gt/||gt|| ||_1 (scaling optional); 0 when
// either map has no mass.
Tensor tv_loss(const Tensor& pred, const Tensor& gt, bool scale_by_count = true);
// |estimate - gt_count|, subgradient 0 at equality.
Tensor rtm_loss(const Tensor& estimate, double gt_count);

struct LossBreakdown {
    double count = 0.0;
    double ot = 0.0;
    double tv = 0.0;
    double rtm = 0.0;
    std::vector<double> aux;  // full L_d of each auxiliary map
    double total = 0.0;
};

struct TotalLoss {
    Tensor value;
    LossBreakdown breakdown;
};

// L_d(main) + lambda * L_r + aux * sum_i L_d(aux_i), with
// L_d = count + lambda_1 * OT + lambda_2 * TV. The RTM term is skipped when
// no estimate is given.
TotalLoss total_loss(const Tensor& main_density, const std::vector<Tensor>& aux_density, const Tensor& gt,
                     const std::optional<Tensor>& count_estimate, const LossWeights& weights,
                     const SinkhornConfig& cfg, const TransportGrid* grid = nullptr);

struct Metrics {
    double mae = 0.0;
    double mse = 0.0;  // root of the mean squared error
    double nae = 0.0;
    std::size_t count = 0;
    std::size_t nae_excluded = 0;  // samples with zero ground truth
};

Metrics compute_metrics(std::span<const double> predicted, std::span<const double> ground_truth);

}  // namespace crowdctx
