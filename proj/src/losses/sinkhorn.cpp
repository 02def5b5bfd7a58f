#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "crowdctx/core/errors.hpp"
#include "crowdctx/losses.hpp"

namespace crowdctx {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Largest C/epsilon for which the factored kernel exp(-C/epsilon) stays far
// above the double underflow threshold.
constexpr double kMaxKernelExponent = 600.0;

double safe_log(double x) { return x > 0.0 ? std::log(x) : kNegInf; }

void check_marginal(const char* name, std::span<const double> m) {
    double total = 0.0;
    for (double v : m) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw ContractError(std::string("sinkhorn: ") + name + " has a negative or non-finite entry");
        }
        total += v;
    }
    if (total == 0.0) throw ContractError(std::string("sinkhorn: ") + name + " has zero mass");
    if (std::fabs(total - 1.0) > 1e-9) {
        throw ContractError(std::string("sinkhorn: ") + name + " must sum to 1, sums to " + std::to_string(total));
    }
}

// Evaluations of the Gibbs kernel exp(-C_ij / eps) for a symmetric cost. All
// arguments are in units of epsilon (u = f / eps, v = g / eps).
class GibbsOperator {
public:
    virtual ~GibbsOperator() = default;
    // out_i = log sum_j exp(h_j - C_ij / eps); h_j may be -inf.
    virtual void lse(std::span<const double> h, std::span<double> out) const = 0;
    // out_i = sum_j y_j exp(u_i + v_j - C_ij / eps), skipping y_j == 0.
    virtual void weighted(std::span<const double> u, std::span<const double> v, std::span<const double> y,
                          std::span<double> out) const = 0;
    // out_i = sum_j y_j C_ij exp(u_i + v_j - C_ij / eps), skipping y_j == 0.
    virtual void weighted_cost(std::span<const double> u, std::span<const double> v,
                               std::span<const double> y, std::span<double> out) const = 0;
};

// Entry-by-entry log-domain evaluation; valid for any epsilon.
class DenseGibbs final : public GibbsOperator {
public:
    DenseGibbs(const Tensor& cost, double eps) : n_(cost.dim(0)), c_(cost.data()), eps_(eps) {}

    void lse(std::span<const double> h, std::span<double> out) const override {
        for (std::size_t i = 0; i < n_; ++i) {
            const double* row = c_.data() + i * n_;
            double mx = kNegInf;
            for (std::size_t j = 0; j < n_; ++j) mx = std::max(mx, h[j] - row[j] / eps_);
            double s = 0.0;
            for (std::size_t j = 0; j < n_; ++j) {
                if (h[j] != kNegInf) s += std::exp(h[j] - row[j] / eps_ - mx);
            }
            out[i] = mx + std::log(s);
        }
    }

    void weighted(std::span<const double> u, std::span<const double> v, std::span<const double> y,
                  std::span<double> out) const override {
        for (std::size_t i = 0; i < n_; ++i) {
            const double* row = c_.data() + i * n_;
            double s = 0.0;
            for (std::size_t j = 0; j < n_; ++j) {
                if (y[j] != 0.0) s += y[j] * std::exp(u[i] + v[j] - row[j] / eps_);
            }
            out[i] = s;
        }
    }

    void weighted_cost(std::span<const double> u, std::span<const double> v, std::span<const double> y,
                       std::span<double> out) const override {
        for (std::size_t i = 0; i < n_; ++i) {
            const double* row = c_.data() + i * n_;
            double s = 0.0;
            for (std::size_t j = 0; j < n_; ++j) {
                if (y[j] != 0.0) s += y[j] * row[j] * std::exp(u[i] + v[j] - row[j] / eps_);
            }
            out[i] = s;
        }
    }

private:
    std::size_t n_;
    std::span<const double> c_;
    double eps_;
};

// Grid cost C = Cy (+) Cx factors the kernel as Ky (x) Kx, so every kernel
// product costs n (h + w) instead of n^2. Potentials are shifted by their
// maximum before exponentiation.
class SeparableGibbs final : public GibbsOperator {
public:
    SeparableGibbs(const TransportGrid& grid, double eps) : h_(grid.h()), w_(grid.w()) {
        auto axis = [&](std::size_t len, std::vector<double>& k, std::vector<double>& ck) {
            k.resize(len * len);
            ck.resize(len * len);
            for (std::size_t a = 0; a < len; ++a) {
                for (std::size_t b = 0; b < len; ++b) {
                    const double c = grid.axis_cost(a > b ? a - b : b - a);
                    k[a * len + b] = std::exp(-c / eps);
                    ck[a * len + b] = c * k[a * len + b];
                }
            }
        };
        axis(h_, ky_, cky_);
        axis(w_, kx_, ckx_);
    }

    void lse(std::span<const double> h, std::span<double> out) const override {
        const double s = *std::max_element(h.begin(), h.end());
        std::vector<double> z(h.size());
        for (std::size_t j = 0; j < h.size(); ++j) z[j] = h[j] == kNegInf ? 0.0 : std::exp(h[j] - s);
        std::vector<double> kz(h.size());
        apply(ky_, kx_, z, kz);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = s + std::log(kz[i]);
    }

    void weighted(std::span<const double> u, std::span<const double> v, std::span<const double> y,
                  std::span<double> out) const override {
        weighted_impl(u, v, y, out, false);
    }

    void weighted_cost(std::span<const double> u, std::span<const double> v, std::span<const double> y,
                       std::span<double> out) const override {
        weighted_impl(u, v, y, out, true);
    }

private:
    void weighted_impl(std::span<const double> u, std::span<const double> v, std::span<const double> y,
                       std::span<double> out, bool with_cost) const {
        double s = kNegInf;
        for (std::size_t j = 0; j < v.size(); ++j) {
            if (y[j] != 0.0) s = std::max(s, v[j]);
        }
        if (s == kNegInf) {
            std::fill(out.begin(), out.end(), 0.0);
            return;
        }
        std::vector<double> z(v.size());
        for (std::size_t j = 0; j < v.size(); ++j) z[j] = y[j] == 0.0 ? 0.0 : y[j] * std::exp(v[j] - s);
        std::vector<double> kz(v.size());
        if (with_cost) {
            // C K = (Cy Ky) (x) Kx + Ky (x) (Cx Kx)
            std::vector<double> part(v.size());
            apply(cky_, kx_, z, kz);
            apply(ky_, ckx_, z, part);
            for (std::size_t i = 0; i < kz.size(); ++i) kz[i] += part[i];
        } else {
            apply(ky_, kx_, z, kz);
        }
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = kz[i] == 0.0 ? 0.0 : std::copysign(std::exp(u[i] + s + std::log(std::fabs(kz[i]))), kz[i]);
        }
    }

    // out[y1, x1] = sum_{y2, x2} ay[y1, y2] ax[x1, x2] in[y2, x2]
    void apply(const std::vector<double>& ay, const std::vector<double>& ax, const std::vector<double>& in,
               std::vector<double>& out) const {
        std::vector<double> tmp(h_ * w_, 0.0);
        for (std::size_t y2 = 0; y2 < h_; ++y2) {
            const double* src = in.data() + y2 * w_;
            double* dst = tmp.data() + y2 * w_;
            for (std::size_t x1 = 0; x1 < w_; ++x1) {
                const double* krow = ax.data() + x1 * w_;
                double acc = 0.0;
                for (std::size_t x2 = 0; x2 < w_; ++x2) acc += krow[x2] * src[x2];
                dst[x1] = acc;
            }
        }
        std::fill(out.begin(), out.end(), 0.0);
        for (std::size_t y1 = 0; y1 < h_; ++y1) {
            double* dst = out.data() + y1 * w_;
            for (std::size_t y2 = 0; y2 < h_; ++y2) {
                const double k = ay[y1 * h_ + y2];
                const double* src = tmp.data() + y2 * w_;
                for (std::size_t x1 = 0; x1 < w_; ++x1) dst[x1] += k * src[x1];
            }
        }
    }

    std::size_t h_, w_;
    std::vector<double> ky_, kx_, cky_, ckx_;
};

// Forward state of one unrolled solve: potentials after every iteration.
struct SinkhornTrace {
    std::vector<std::vector<double>> u;  // u[t], t = 1..T (index t-1)
    std::vector<std::vector<double>> v;  // v[t], t = 0..T (v[0] = 0)
    std::vector<double> history;
    double marginal_error = 0.0;
};

SinkhornTrace run_sinkhorn(const GibbsOperator& op, std::span<const double> a, std::span<const double> b,
                           const SinkhornConfig& cfg) {
    const std::size_t n = a.size();
    std::vector<double> log_a(n), log_b(n), h(n), s(n);
    for (std::size_t i = 0; i < n; ++i) {
        log_a[i] = safe_log(a[i]);
        log_b[i] = safe_log(b[i]);
    }
    SinkhornTrace tr;
    tr.v.emplace_back(n, 0.0);
    for (int t = 1;; ++t) {
        const auto& v = tr.v.back();
        for (std::size_t j = 0; j < n; ++j) h[j] = v[j] + log_b[j];
        op.lse(h, s);
        if (t > 1) {
            // Row sums of the current plan are a_i exp(u_i + s_i).
            const auto& u = tr.u.back();
            double err = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (a[i] > 0.0) err += a[i] * std::fabs(std::exp(u[i] + s[i]) - 1.0);
            }
            tr.history.push_back(err);
            tr.marginal_error = err;
            if (err < cfg.tol || t > cfg.max_iters) break;
        }
        std::vector<double> u(n);
        for (std::size_t i = 0; i < n; ++i) u[i] = -s[i];
        for (std::size_t i = 0; i < n; ++i) h[i] = u[i] + log_a[i];
        std::vector<double> vn(n);
        op.lse(h, vn);
        for (auto& x : vn) x = -x;
        tr.u.push_back(std::move(u));
        tr.v.push_back(std::move(vn));
    }
    return tr;
}

std::unique_ptr<GibbsOperator> make_operator(const TransportGrid& grid, double eps) {
    // Max normalized cost is 1 (0 for a single cell).
    if (1.0 / eps <= kMaxKernelExponent) return std::make_unique<SeparableGibbs>(grid, eps);
    return std::make_unique<DenseGibbs>(grid.cost(), eps);
}

}  // namespace

void SinkhornConfig::validate() const {
    if (!(epsilon > 0.0)) throw ContractError("sinkhorn epsilon must be positive");
    if (max_iters < 1) throw ContractError("sinkhorn max_iters must be >= 1");
    if (tol < 0.0) throw ContractError("sinkhorn tol must be >= 0");
}

Tensor cost_matrix(std::size_t h, std::size_t w) {
    if (h < 1 || w < 1) throw DimensionError("cost_matrix needs a non-empty grid");
    const std::size_t n = h * w;
    const double dh = static_cast<double>(h - 1), dw = static_cast<double>(w - 1);
    const double diag2 = dh * dh + dw * dw;
    std::vector<double> c(n * n, 0.0);
    if (diag2 > 0.0) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                const double dy = static_cast<double>(i / w) - static_cast<double>(j / w);
                const double dx = static_cast<double>(i % w) - static_cast<double>(j % w);
                c[i * n + j] = (dy * dy + dx * dx) / diag2;
            }
        }
    }
    return Tensor::from({n, n}, std::move(c));
}

TransportGrid::TransportGrid(std::size_t h, std::size_t w) : h_(h), w_(w), cost_(cost_matrix(h, w)) {
    const double dh = static_cast<double>(h - 1), dw = static_cast<double>(w - 1);
    diag2_ = dh * dh + dw * dw;
    if (diag2_ == 0.0) diag2_ = 1.0;  // single cell: every distance is 0 anyway
}

SinkhornResult sinkhorn_plan(std::span<const double> a, std::span<const double> b, const Tensor& cost,
                             const SinkhornConfig& cfg) {
    cfg.validate();
    const std::size_t n = a.size(), m = b.size();
    if (cost.rank() != 2 || cost.dim(0) != n || cost.dim(1) != m) {
        throw DimensionError("sinkhorn: cost " + shape_string(cost.shape()) + " for marginals of size " +
                             std::to_string(n) + " and " + std::to_string(m));
    }
    check_marginal("source", a);
    check_marginal("target", b);
    const auto c = cost.data();
    const double eps = cfg.epsilon;

    // Plain per-entry log-sum-exp; serves general (possibly asymmetric) costs.
    std::vector<double> f(n, 0.0), g(m, 0.0), log_a(n), log_b(m);
    for (std::size_t i = 0; i < n; ++i) log_a[i] = safe_log(a[i]);
    for (std::size_t j = 0; j < m; ++j) log_b[j] = safe_log(b[j]);

    auto row_lse = [&](std::size_t i) {
        double mx = kNegInf;
        for (std::size_t j = 0; j < m; ++j) {
            if (log_b[j] != kNegInf) mx = std::max(mx, (g[j] - c[i * m + j]) / eps + log_b[j]);
        }
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            if (log_b[j] != kNegInf) s += std::exp((g[j] - c[i * m + j]) / eps + log_b[j] - mx);
        }
        return mx + std::log(s);
    };
    auto col_lse = [&](std::size_t j) {
        double mx = kNegInf;
        for (std::size_t i = 0; i < n; ++i) {
            if (log_a[i] != kNegInf) mx = std::max(mx, (f[i] - c[i * m + j]) / eps + log_a[i]);
        }
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (log_a[i] != kNegInf) s += std::exp((f[i] - c[i * m + j]) / eps + log_a[i] - mx);
        }
        return mx + std::log(s);
    };

    SinkhornResult res;
    std::vector<double> lse(n);
    for (int t = 1;; ++t) {
        for (std::size_t i = 0; i < n; ++i) lse[i] = row_lse(i);
        if (t > 1) {
            double err = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (a[i] > 0.0) err += a[i] * std::fabs(std::exp(f[i] / eps + lse[i]) - 1.0);
            }
            res.marginal_history.push_back(err);
            res.marginal_error = err;
            if (err < cfg.tol || t > cfg.max_iters) break;
        }
        for (std::size_t i = 0; i < n; ++i) f[i] = -eps * lse[i];
        for (std::size_t j = 0; j < m; ++j) g[j] = -eps * col_lse(j);
        res.iterations = t;
    }

    res.plan.assign(n * m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (a[i] == 0.0) continue;
        for (std::size_t j = 0; j < m; ++j) {
            if (b[j] == 0.0) continue;
            const double p = std::exp((f[i] + g[j] - c[i * m + j]) / eps + log_a[i] + log_b[j]);
            res.plan[i * m + j] = p;
            res.transport_cost += p * c[i * m + j];
        }
    }
    return res;
}

Tensor entropic_transport_cost(const Tensor& a, const Tensor& b, const TransportGrid& grid,
                               const SinkhornConfig& cfg, SinkhornResult* info) {
    cfg.validate();
    const std::size_t n = grid.size();
    if (a.numel() != n || b.numel() != n) {
        throw DimensionError("transport: marginals of " + std::to_string(a.numel()) + " and " +
                             std::to_string(b.numel()) + " values on a grid of " + std::to_string(n));
    }
    check_marginal("source", a.data());
    check_marginal("target", b.data());

    std::shared_ptr<const GibbsOperator> op = make_operator(grid, cfg.epsilon);
    auto trace = std::make_shared<SinkhornTrace>(run_sinkhorn(*op, a.data(), b.data(), cfg));
    const auto& u = trace->u.back();
    const auto& v = trace->v.back();

    std::vector<double> wc(n);
    op->weighted_cost(u, v, b.data(), wc);
    double cost = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (a.data()[i] > 0.0) cost += a.data()[i] * wc[i];
    }

    if (info) {
        info->iterations = static_cast<int>(trace->u.size());
        info->marginal_error = trace->marginal_error;
        info->marginal_history = trace->history;
        info->transport_cost = cost;
        info->plan.clear();
    }

    return detail::make_result(
        "entropic_transport_cost", {}, {cost}, {a, b}, [op, trace, n](detail::Node& self) {
            const double seed = self.grad[0];
            const double* av = self.parents[0]->value.data();
            const double* bv = self.parents[1]->value.data();
            std::span<const double> as(av, n), bs(bv, n);
            const std::size_t steps = trace->u.size();

            std::vector<double> abar(n), bbar(n), ubar(n), vbar(n), tmp(n);
            // Adjoints of u and v are proportional to a and b; zero-mass
            // entries are pinned to 0 so that unbounded kernel ratios at
            // those entries never multiply into them.
            auto pin = [n](std::vector<double>& x, const double* mass) {
                for (std::size_t i = 0; i < n; ++i) {
                    if (mass[i] == 0.0) x[i] = 0.0;
                }
            };
            // Direct dependence of <C, P> on a, b, u^T, v^T.
            op->weighted_cost(trace->u.back(), trace->v.back(), bs, abar);
            op->weighted_cost(trace->v.back(), trace->u.back(), as, bbar);
            for (std::size_t i = 0; i < n; ++i) {
                ubar[i] = av[i] * abar[i];
                vbar[i] = bv[i] * bbar[i];
            }
            pin(ubar, av);
            pin(vbar, bv);
            for (std::size_t t = steps; t >= 1; --t) {
                const auto& ut = trace->u[t - 1];
                const auto& vt = trace->v[t];
                const auto& vprev = trace->v[t - 1];
                // v^t = -lse_i(u^t_i + log a_i - C_ij / eps)
                op->weighted(ut, vt, vbar, tmp);
                for (std::size_t i = 0; i < n; ++i) {
                    ubar[i] -= av[i] * tmp[i];
                    abar[i] -= tmp[i];
                }
                pin(ubar, av);
                // u^t = -lse_j(v^{t-1}_j + log b_j - C_ij / eps)
                op->weighted(vprev, ut, ubar, tmp);
                for (std::size_t j = 0; j < n; ++j) {
                    vbar[j] = -bv[j] * tmp[j];
                    bbar[j] -= tmp[j];
                }
                pin(vbar, bv);
                std::fill(ubar.begin(), ubar.end(), 0.0);
            }
            for (std::size_t p = 0; p < 2; ++p) {
                auto& parent = *self.parents[p];
                if (!parent.requires_grad) continue;
                parent.ensure_grad();
                const auto& src = p == 0 ? abar : bbar;
                for (std::size_t i = 0; i < n; ++i) parent.grad[i] += seed * src[i];
            }
        });
}

}  // namespace crowdctx
