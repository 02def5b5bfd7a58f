#include <cmath>

#include "crowdctx/core/errors.hpp"
#include "crowdctx/core/ops.hpp"
#include "crowdctx/losses.hpp"

namespace crowdctx {

namespace {

double total_of(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return s;
}

void require_same_grid(const char* what, const Tensor& pred, const Tensor& gt) {
    if (pred.shape() != gt.shape()) {
        throw DimensionError(std::string(what) + ": prediction " + shape_string(pred.shape()) +
                             " vs ground truth " + shape_string(gt.shape()));
    }
}

}  // namespace

void LossWeights::validate() const {
    if (rtm < 0.0 || ot < 0.0 || tv < 0.0 || aux < 0.0) throw ConfigError("loss weights must be >= 0");
}

Tensor count_loss(const Tensor& pred, const Tensor& gt) {
    require_same_grid("count_loss", pred, gt);
    return ops::abs(ops::add_scalar(ops::sum(pred), -total_of(gt)));
}

Tensor ot_loss(const Tensor& pred, const Tensor& gt, const SinkhornConfig& cfg, const TransportGrid* grid) {
    require_same_grid("ot_loss", pred, gt);
    if (pred.rank() != 2) throw DimensionError("ot_loss expects [h, w] maps, got " + shape_string(pred.shape()));
    if (total_of(pred) <= 0.0 || total_of(gt) <= 0.0) return Tensor::scalar(0.0);
    std::optional<TransportGrid> local;
    if (!grid || grid->h() != pred.dim(0) || grid->w() != pred.dim(1)) {
        local.emplace(pred.dim(0), pred.dim(1));
        grid = &*local;
    }
    const std::size_t n = pred.numel();
    Tensor flat = ops::reshape(pred, {n});
    Tensor a = ops::div_scalar(flat, ops::sum(flat));
    std::vector<double> b(gt.data().begin(), gt.data().end());
    const double gt_total = total_of(gt);
    for (auto& v : b) v /= gt_total;
    return entropic_transport_cost(a, Tensor::from({n}, std::move(b)), *grid, cfg);
}

Tensor tv_loss(const Tensor& pred, const Tensor& gt, bool scale_by_count) {
    require_same_grid("tv_loss", pred, gt);
    const double gt_total = total_of(gt);
    if (total_of(pred) <= 0.0 || gt_total <= 0.0) return Tensor::scalar(0.0);
    Tensor shape_pred = ops::div_scalar(pred, ops::sum(pred));
    Tensor shape_gt = ops::scale(gt.detach(), 1.0 / gt_total);
    Tensor tv = ops::scale(ops::sum(ops::abs(ops::sub(shape_pred, shape_gt))), 0.5);
    return scale_by_count ? ops::scale(tv, gt_total) : tv;
}

Tensor rtm_loss(const Tensor& estimate, double gt_count) {
    if (estimate.numel() != 1) throw DimensionError("rtm_loss expects a scalar estimate");
    return ops::abs(ops::add_scalar(ops::reshape(estimate, {}), -gt_count));
}

TotalLoss total_loss(const Tensor& main_density, const std::vector<Tensor>& aux_density, const Tensor& gt,
                     const std::optional<Tensor>& count_estimate, const LossWeights& weights,
                     const SinkhornConfig& cfg, const TransportGrid* grid) {
    weights.validate();
    TotalLoss out;
    auto density_loss = [&](const Tensor& pred, double* count, double* ot, double* tv) {
        Tensor c = count_loss(pred, gt);
        Tensor total = c;
        *count = c.item();
        *ot = 0.0;
        *tv = 0.0;
        if (weights.ot > 0.0) {
            Tensor o = ot_loss(pred, gt, cfg, grid);
            *ot = o.item();
            total = ops::add(total, ops::scale(o, weights.ot));
        }
        if (weights.tv > 0.0) {
            Tensor t = tv_loss(pred, gt, weights.tv_scale_by_count);
            *tv = t.item();
            total = ops::add(total, ops::scale(t, weights.tv));
        }
        return total;
    };

    auto& br = out.breakdown;
    Tensor total = density_loss(main_density, &br.count, &br.ot, &br.tv);
    if (count_estimate) {
        double gt_total = 0.0;
        for (double v : gt.data()) gt_total += v;
        Tensor r = rtm_loss(*count_estimate, gt_total);
        br.rtm = r.item();
        total = ops::add(total, ops::scale(r, weights.rtm));
    }
    for (const auto& aux : aux_density) {
        double c = 0.0, o = 0.0, t = 0.0;
        Tensor ld = density_loss(aux, &c, &o, &t);
        br.aux.push_back(ld.item());
        total = ops::add(total, ops::scale(ld, weights.aux));
    }
    br.total = total.item();
    out.value = total;
    return out;
}

Metrics compute_metrics(std::span<const double> predicted, std::span<const double> ground_truth) {
    if (predicted.size() != ground_truth.size() || predicted.empty()) {
        throw ContractError("metrics need equal, non-empty prediction and ground-truth lists");
    }
    Metrics m;
    m.count = predicted.size();
    double abs_sum = 0.0, sq_sum = 0.0, nae_sum = 0.0;
    std::size_t nae_n = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        const double err = std::fabs(predicted[i] - ground_truth[i]);
        abs_sum += err;
        sq_sum += err * err;
        if (ground_truth[i] > 0.0) {
            nae_sum += err / ground_truth[i];
            ++nae_n;
        } else {
            ++m.nae_excluded;
        }
    }
    const double n = static_cast<double>(m.count);
    m.mae = abs_sum / n;
    m.mse = std::sqrt(sq_sum / n);
    m.nae = nae_n ? nae_sum / static_cast<double>(nae_n) : 0.0;
    return m;
}

}  // namespace crowdctx
