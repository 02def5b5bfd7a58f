#include "crowdctx/core/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "crowdctx/core/errors.hpp"

namespace crowdctx::ops {

using detail::make_result;
using detail::Node;

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                             " vs " + shape_string(b.shape()));
    }
}

void require_rank(const char* op, const Tensor& x, std::size_t rank) {
    if (x.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                             ", got shape " + shape_string(x.shape()));
    }
}

void require_scalar(const char* op, const Tensor& s) {
    if (s.numel() != 1) {
        throw DimensionError(std::string(op) + ": expected one-element tensor, got " +
                             shape_string(s.shape()));
    }
}

// Gradient buffer of parent i, or nullptr when that parent takes no gradient.
double* parent_grad(Node& self, std::size_t i) {
    Node& p = *self.parents[i];
    if (!p.requires_grad) return nullptr;
    p.ensure_grad();
    return p.grad.data();
}

const double* parent_value(Node& self, std::size_t i) { return self.parents[i]->value.data(); }

// c[n, m] += a[n, k] * b[k, m]
void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        double* crow = c + i * m;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[n, k] += a[n, m] * b[k, m]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t m,
             std::size_t k) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = a + i * m;
        double* crow = c + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* brow = b + p * m;
            double acc = 0.0;
            for (std::size_t j = 0; j < m; ++j) acc += arow[j] * brow[j];
            crow[p] += acc;
        }
    }
}

// c[k, m] += a[n, k]^T * b[n, m]
void gemm_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

struct Im2Col {
    std::size_t c, h, w, k, s, p, out_h, out_w;

    std::size_t rows() const { return out_h * out_w; }
    std::size_t cols() const { return c * k * k; }

    template <typename Fn>
    void for_each(Fn&& fn) const {
        // fn(row, col, input_index) for every in-bounds tap.
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                const std::size_t row = oy * out_w + ox;
                for (std::size_t ch = 0; ch < c; ++ch) {
                    for (std::size_t ky = 0; ky < k; ++ky) {
                        const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(p);
                        if (iy < 0 || iy >= static_cast<long>(h)) continue;
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const long ix = static_cast<long>(ox * s + kx) - static_cast<long>(p);
                            if (ix < 0 || ix >= static_cast<long>(w)) continue;
                            const std::size_t col = (ch * k + ky) * k + kx;
                            fn(row, col,
                               (ch * h + static_cast<std::size_t>(iy)) * w +
                                   static_cast<std::size_t>(ix));
                        }
                    }
                }
            }
        }
    }

    std::vector<double> gather(const double* x) const {
        std::vector<double> out(rows() * cols(), 0.0);
        const std::size_t nc = cols();
        for_each([&](std::size_t r, std::size_t col, std::size_t idx) { out[r * nc + col] = x[idx]; });
        return out;
    }

    void scatter_add(const double* cols_grad, double* x_grad) const {
        const std::size_t nc = cols();
        for_each([&](std::size_t r, std::size_t col, std::size_t idx) {
            x_grad[idx] += cols_grad[r * nc + col];
        });
    }
};

Im2Col make_im2col(const char* op, const Tensor& x, std::size_t k, std::size_t s, std::size_t p) {
    require_rank(op, x, 3);
    if (k < 1 || s < 1) throw DimensionError(std::string(op) + ": window and stride must be >= 1");
    const auto g = window_geometry(x.dim(1), x.dim(2), k, s, p);
    return Im2Col{x.dim(0), x.dim(1), x.dim(2), k, s, p, g.out_h, g.out_w};
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
    std::vector<double> out(x.numel());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
    return make_result(op, x.shape(), std::move(out), {x}, [deriv](Node& self) {
        double* g = parent_grad(self, 0);
        if (!g) return;
        const double* xv = parent_value(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            g[i] += self.grad[i] * deriv(xv[i], self.value[i]);
        }
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_result("add", a.shape(), std::move(out), {a, b}, [](Node& self) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (double* g = parent_grad(self, p)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
            }
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return make_result("sub", a.shape(), std::move(out), {a, b}, [](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
        if (double* g = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return make_result("mul", a.shape(), std::move(out), {a, b}, [](Node& self) {
        const double* av = parent_value(self, 0);
        const double* bv = parent_value(self, 1);
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
        }
        if (double* g = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
        }
    });
}

Tensor scale(const Tensor& x, double factor) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
    return make_result("scale", x.shape(), std::move(out), {x}, [factor](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
        }
    });
}

Tensor add_scalar(const Tensor& x, double offset) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + offset;
    return make_result("add_scalar", x.shape(), std::move(out), {x}, [](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
    require_scalar("mul_scalar", s);
    const double sv = s.data()[0];
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * sv;
    return make_result("mul_scalar", x.shape(), std::move(out), {x, s}, [](Node& self) {
        const double* xv = parent_value(self, 0);
        const double sv = parent_value(self, 1)[0];
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * sv;
        }
        if (double* g = parent_grad(self, 1)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * xv[i];
            g[0] += acc;
        }
    });
}

Tensor div_scalar(const Tensor& x, const Tensor& s) {
    require_scalar("div_scalar", s);
    const double sv = s.data()[0];
    if (sv == 0.0) throw NumericError("div_scalar: division by zero");
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] / sv;
    return make_result("div_scalar", x.shape(), std::move(out), {x, s}, [](Node& self) {
        const double sv = parent_value(self, 1)[0];
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / sv;
        }
        if (double* g = parent_grad(self, 1)) {
            // d(x/s)/ds = -(x/s)/s
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * self.value[i];
            g[0] -= acc / sv;
        }
    });
}

Tensor add_row(const Tensor& x, const Tensor& bias) {
    require_rank("add_row", x, 2);
    if (bias.numel() != x.dim(1)) {
        throw DimensionError("add_row: bias of " + std::to_string(bias.numel()) +
                             " values for rows of width " + std::to_string(x.dim(1)));
    }
    const std::size_t n = x.dim(0), m = x.dim(1);
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) out[i * m + j] = x.data()[i * m + j] + bias.data()[j];
    }
    return make_result("add_row", x.shape(), std::move(out), {x, bias}, [n, m](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < n * m; ++i) g[i] += self.grad[i];
        }
        if (double* g = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < m; ++j) g[j] += self.grad[i * m + j];
            }
        }
    });
}

Tensor mul_channels(const Tensor& x, const Tensor& gate) {
    if (x.rank() < 1 || gate.numel() != x.dim(0)) {
        throw DimensionError("mul_channels: gate of " + std::to_string(gate.numel()) +
                             " values for input " + shape_string(x.shape()));
    }
    const std::size_t c = x.dim(0);
    const std::size_t plane = c ? x.numel() / c : 0;
    std::vector<double> out(x.numel());
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < plane; ++i) {
            out[ch * plane + i] = x.data()[ch * plane + i] * gate.data()[ch];
        }
    }
    return make_result("mul_channels", x.shape(), std::move(out), {x, gate},
                       [c, plane](Node& self) {
                           const double* xv = parent_value(self, 0);
                           const double* gv = parent_value(self, 1);
                           if (double* g = parent_grad(self, 0)) {
                               for (std::size_t ch = 0; ch < c; ++ch) {
                                   for (std::size_t i = 0; i < plane; ++i) {
                                       g[ch * plane + i] += self.grad[ch * plane + i] * gv[ch];
                                   }
                               }
                           }
                           if (double* g = parent_grad(self, 1)) {
                               for (std::size_t ch = 0; ch < c; ++ch) {
                                   double acc = 0.0;
                                   for (std::size_t i = 0; i < plane; ++i) {
                                       acc += self.grad[ch * plane + i] * xv[ch * plane + i];
                                   }
                                   g[ch] += acc;
                               }
                           }
                       });
}

namespace {
thread_local std::vector<signed char>* g_kinks = nullptr;

void record_signs(const Tensor& x) {
    if (!g_kinks) return;
    for (double v : x.data()) g_kinks->push_back(static_cast<signed char>((v > 0.0) - (v < 0.0)));
}
}  // namespace

KinkRecorder::KinkRecorder() : previous_(g_kinks) { g_kinks = &pattern_; }
KinkRecorder::~KinkRecorder() { g_kinks = previous_; }

Tensor relu(const Tensor& x) {
    record_signs(x);
    return unary(
        "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
    return unary(
        "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
        [](double v, double) {
            const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
            const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
            return cdf + v * pdf;
        });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        "sigmoid", x,
        [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor abs(const Tensor& x) {
    record_signs(x);
    return unary(
        "abs", x, [](double v) { return std::fabs(v); },
        [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    return make_result("sum", {}, {acc}, {x}, [](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            const std::size_t n = self.parents[0]->value.size();
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
        }
    });
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw DimensionError("mean of empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    if (a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    }
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    std::vector<double> out(n * m, 0.0);
    gemm_nn(a.data().data(), b.data().data(), out.data(), n, k, m);
    return make_result("matmul", {n, m}, std::move(out), {a, b}, [n, k, m](Node& self) {
        const double* av = parent_value(self, 0);
        const double* bv = parent_value(self, 1);
        if (double* g = parent_grad(self, 0)) gemm_nt(self.grad.data(), bv, g, n, m, k);
        if (double* g = parent_grad(self, 1)) gemm_tn(av, self.grad.data(), g, n, k, m);
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    Tensor y = matmul(x, w);
    return b.numel() ? add_row(y, b) : y;
}

Tensor transpose(const Tensor& x) {
    require_rank("transpose", x, 2);
    const std::size_t n = x.dim(0), m = x.dim(1);
    std::vector<double> out(n * m);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) out[j * n + i] = x.data()[i * m + j];
    }
    return make_result("transpose", {m, n}, std::move(out), {x}, [n, m](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < m; ++j) g[i * m + j] += self.grad[j * n + i];
            }
        }
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
    }
    return make_result("reshape", std::move(shape), x.to_vector(), {x}, [](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    Shape tail(parts[0].shape().begin() + (parts[0].rank() ? 1 : 0), parts[0].shape().end());
    std::size_t rows = 0;
    std::vector<double> out;
    for (const auto& p : parts) {
        if (p.rank() == 0 || Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
            throw DimensionError("concat_rows: incompatible shape " + shape_string(p.shape()));
        }
        rows += p.dim(0);
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    Shape shape{rows};
    shape.insert(shape.end(), tail.begin(), tail.end());
    return make_result("concat_rows", std::move(shape), std::move(out), parts, [](Node& self) {
        std::size_t offset = 0;
        for (std::size_t p = 0; p < self.parents.size(); ++p) {
            const std::size_t n = self.parents[p]->value.size();
            if (double* g = parent_grad(self, p)) {
                for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
            }
            offset += n;
        }
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const std::size_t n = parts[0].rank() == 2 ? parts[0].dim(0) : 0;
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        require_rank("concat_cols", p, 2);
        if (p.dim(0) != n) {
            throw DimensionError("concat_cols: row count mismatch " + shape_string(p.shape()));
        }
        widths.push_back(p.dim(1));
        total += p.dim(1);
    }
    std::vector<double> out(n * total);
    std::size_t col = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto src = parts[p].data();
        for (std::size_t i = 0; i < n; ++i) {
            std::copy_n(src.begin() + static_cast<long>(i * widths[p]), widths[p],
                        out.begin() + static_cast<long>(i * total + col));
        }
        col += widths[p];
    }
    return make_result("concat_cols", {n, total}, std::move(out), parts,
                       [n, total, widths](Node& self) {
                           std::size_t col = 0;
                           for (std::size_t p = 0; p < widths.size(); ++p) {
                               if (double* g = parent_grad(self, p)) {
                                   for (std::size_t i = 0; i < n; ++i) {
                                       for (std::size_t j = 0; j < widths[p]; ++j) {
                                           g[i * widths[p] + j] += self.grad[i * total + col + j];
                                       }
                                   }
                               }
                               col += widths[p];
                           }
                       });
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
    if (x.rank() == 0 || start + count > x.dim(0)) {
        throw DimensionError("slice_rows: [" + std::to_string(start) + ", +" +
                             std::to_string(count) + ") of " + shape_string(x.shape()));
    }
    const std::size_t row = x.numel() / x.dim(0);
    Shape shape = x.shape();
    shape[0] = count;
    std::vector<double> out(x.data().begin() + static_cast<long>(start * row),
                            x.data().begin() + static_cast<long>((start + count) * row));
    return make_result("slice_rows", std::move(shape), std::move(out), {x},
                       [start, row](Node& self) {
                           if (double* g = parent_grad(self, 0)) {
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                   g[start * row + i] += self.grad[i];
                               }
                           }
                       });
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
    require_rank("slice_cols", x, 2);
    if (start + count > x.dim(1)) {
        throw DimensionError("slice_cols: [" + std::to_string(start) + ", +" +
                             std::to_string(count) + ") of " + shape_string(x.shape()));
    }
    const std::size_t n = x.dim(0), m = x.dim(1);
    std::vector<double> out(n * count);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x.data()[i * m + start + j];
    }
    return make_result("slice_cols", {n, count}, std::move(out), {x},
                       [n, m, start, count](Node& self) {
                           if (double* g = parent_grad(self, 0)) {
                               for (std::size_t i = 0; i < n; ++i) {
                                   for (std::size_t j = 0; j < count; ++j) {
                                       g[i * m + start + j] += self.grad[i * count + j];
                                   }
                               }
                           }
                       });
}

Tensor softmax_rows(const Tensor& x) {
    require_rank("softmax_rows", x, 2);
    const std::size_t n = x.dim(0), m = x.dim(1);
    std::vector<double> out(n * m);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = x.data().data() + i * m;
        double* dst = out.data() + i * m;
        const double mx = *std::max_element(row, row + m);
        double z = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            dst[j] = std::exp(row[j] - mx);
            z += dst[j];
        }
        for (std::size_t j = 0; j < m; ++j) dst[j] /= z;
    }
    return make_result("softmax_rows", {n, m}, std::move(out), {x}, [n, m](Node& self) {
        double* g = parent_grad(self, 0);
        if (!g) return;
        for (std::size_t i = 0; i < n; ++i) {
            const double* y = self.value.data() + i * m;
            const double* dy = self.grad.data() + i * m;
            double dot = 0.0;
            for (std::size_t j = 0; j < m; ++j) dot += dy[j] * y[j];
            for (std::size_t j = 0; j < m; ++j) g[i * m + j] += y[j] * (dy[j] - dot);
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_rank("layer_norm", x, 2);
    const std::size_t n = x.dim(0), m = x.dim(1);
    if (gamma.numel() != m || beta.numel() != m) {
        throw DimensionError("layer_norm: affine parameters must have " + std::to_string(m) +
                             " values");
    }
    std::vector<double> xhat(n * m), inv_std(n), out(n * m);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = x.data().data() + i * m;
        double mu = 0.0;
        for (std::size_t j = 0; j < m; ++j) mu += row[j];
        mu /= static_cast<double>(m);
        double var = 0.0;
        for (std::size_t j = 0; j < m; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(m);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < m; ++j) {
            xhat[i * m + j] = (row[j] - mu) * inv_std[i];
            out[i * m + j] = xhat[i * m + j] * gamma.data()[j] + beta.data()[j];
        }
    }
    return make_result(
        "layer_norm", {n, m}, std::move(out), {x, gamma, beta},
        [n, m, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
            const double* gv = parent_value(self, 1);
            if (double* g = parent_grad(self, 0)) {
                std::vector<double> dxhat(m);
                for (std::size_t i = 0; i < n; ++i) {
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (std::size_t j = 0; j < m; ++j) {
                        dxhat[j] = self.grad[i * m + j] * gv[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xhat[i * m + j];
                    }
                    mean_d /= static_cast<double>(m);
                    mean_dx /= static_cast<double>(m);
                    for (std::size_t j = 0; j < m; ++j) {
                        g[i * m + j] += inv_std[i] * (dxhat[j] - mean_d - xhat[i * m + j] * mean_dx);
                    }
                }
            }
            if (double* g = parent_grad(self, 1)) {
                for (std::size_t i = 0; i < n * m; ++i) g[i % m] += self.grad[i] * xhat[i];
            }
            if (double* g = parent_grad(self, 2)) {
                for (std::size_t i = 0; i < n * m; ++i) g[i % m] += self.grad[i];
            }
        });
}

WindowGeometry window_geometry(std::size_t h, std::size_t w, std::size_t k, std::size_t s,
                               std::size_t p) {
    if (k < 1 || s < 1) throw DimensionError("window and stride must be >= 1");
    if (h + 2 * p < k || w + 2 * p < k) {
        throw DimensionError("window " + std::to_string(k) + " larger than padded input " +
                             std::to_string(h + 2 * p) + "x" + std::to_string(w + 2 * p));
    }
    return {(h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1};
}

Tensor unfold(const Tensor& x, std::size_t k, std::size_t s, std::size_t p) {
    const Im2Col geo = make_im2col("unfold", x, k, s, p);
    auto out = geo.gather(x.data().data());
    return make_result("unfold", {geo.rows(), geo.cols()}, std::move(out), {x}, [geo](Node& self) {
        if (double* g = parent_grad(self, 0)) geo.scatter_add(self.grad.data(), g);
    });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t pad) {
    require_rank("conv2d", weight, 4);
    const std::size_t co = weight.dim(0), k = weight.dim(2);
    if (weight.dim(3) != k) throw DimensionError("conv2d: kernel must be square");
    const Im2Col geo = make_im2col("conv2d", x, k, stride, pad);
    if (weight.dim(1) != geo.c) {
        throw DimensionError("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                             " input channels, input has " + std::to_string(geo.c));
    }
    if (bias.numel() != 0 && bias.numel() != co) {
        throw DimensionError("conv2d: bias must have " + std::to_string(co) + " values");
    }
    const std::size_t rows = geo.rows(), kk = geo.cols();
    auto cols = geo.gather(x.data().data());
    std::vector<double> out(co * rows, 0.0);
    gemm_nt(weight.data().data(), cols.data(), out.data(), co, kk, rows);
    if (bias.numel()) {
        for (std::size_t o = 0; o < co; ++o) {
            for (std::size_t r = 0; r < rows; ++r) out[o * rows + r] += bias.data()[o];
        }
    }
    std::vector<Tensor> parents{x, weight};
    if (bias.numel()) parents.push_back(bias);
    return make_result("conv2d", {co, geo.out_h, geo.out_w}, std::move(out), std::move(parents),
                       [geo, co, rows, kk, cols = std::move(cols)](Node& self) {
                           const double* dy = self.grad.data();
                           if (double* g = parent_grad(self, 1)) {
                               gemm_nn(dy, cols.data(), g, co, rows, kk);
                           }
                           if (double* g = parent_grad(self, 0)) {
                               std::vector<double> dcols(rows * kk, 0.0);
                               gemm_tn(dy, parent_value(self, 1), dcols.data(), co, rows, kk);
                               geo.scatter_add(dcols.data(), g);
                           }
                           if (self.parents.size() > 2) {
                               if (double* g = parent_grad(self, 2)) {
                                   for (std::size_t o = 0; o < co; ++o) {
                                       for (std::size_t r = 0; r < rows; ++r) g[o] += dy[o * rows + r];
                                   }
                               }
                           }
                       });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                        std::size_t stride, std::size_t pad) {
    require_rank("conv_transpose2d", x, 3);
    require_rank("conv_transpose2d", weight, 4);
    const std::size_t ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t co = weight.dim(1), k = weight.dim(2);
    if (weight.dim(0) != ci || weight.dim(3) != k) {
        throw DimensionError("conv_transpose2d: weight " + shape_string(weight.shape()) +
                             " incompatible with input " + shape_string(x.shape()));
    }
    if (stride < 1) throw DimensionError("conv_transpose2d: stride must be >= 1");
    const long full_h = static_cast<long>((h - 1) * stride + k);
    const long full_w = static_cast<long>((w - 1) * stride + k);
    if (full_h <= static_cast<long>(2 * pad) || full_w <= static_cast<long>(2 * pad)) {
        throw DimensionError("conv_transpose2d: padding consumes the whole output");
    }
    const std::size_t oh = static_cast<std::size_t>(full_h) - 2 * pad;
    const std::size_t ow = static_cast<std::size_t>(full_w) - 2 * pad;
    if (bias.numel() != 0 && bias.numel() != co) {
        throw DimensionError("conv_transpose2d: bias must have " + std::to_string(co) + " values");
    }

    // Visits (input index, weight index, output index) for every tap.
    auto for_each = [=](auto&& fn) {
        for (std::size_t i = 0; i < ci; ++i) {
            for (std::size_t o = 0; o < co; ++o) {
                for (std::size_t ky = 0; ky < k; ++ky) {
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const std::size_t widx = ((i * co + o) * k + ky) * k + kx;
                        for (std::size_t y = 0; y < h; ++y) {
                            const long oy = static_cast<long>(y * stride + ky) - static_cast<long>(pad);
                            if (oy < 0 || oy >= static_cast<long>(oh)) continue;
                            for (std::size_t xx = 0; xx < w; ++xx) {
                                const long ox =
                                    static_cast<long>(xx * stride + kx) - static_cast<long>(pad);
                                if (ox < 0 || ox >= static_cast<long>(ow)) continue;
                                fn((i * h + y) * w + xx, widx,
                                   (o * oh + static_cast<std::size_t>(oy)) * ow +
                                       static_cast<std::size_t>(ox));
                            }
                        }
                    }
                }
            }
        }
    };

    std::vector<double> out(co * oh * ow, 0.0);
    const double* xv = x.data().data();
    const double* wv = weight.data().data();
    for_each([&](std::size_t xi, std::size_t wi, std::size_t oi) { out[oi] += xv[xi] * wv[wi]; });
    if (bias.numel()) {
        for (std::size_t o = 0; o < co; ++o) {
            for (std::size_t i = 0; i < oh * ow; ++i) out[o * oh * ow + i] += bias.data()[o];
        }
    }
    std::vector<Tensor> parents{x, weight};
    if (bias.numel()) parents.push_back(bias);
    return make_result("conv_transpose2d", {co, oh, ow}, std::move(out), std::move(parents),
                       [for_each, co, plane = oh * ow](Node& self) {
                           const double* dy = self.grad.data();
                           const double* xv = parent_value(self, 0);
                           const double* wv = parent_value(self, 1);
                           double* gx = parent_grad(self, 0);
                           double* gw = parent_grad(self, 1);
                           if (gx || gw) {
                               for_each([&](std::size_t xi, std::size_t wi, std::size_t oi) {
                                   if (gx) gx[xi] += dy[oi] * wv[wi];
                                   if (gw) gw[wi] += dy[oi] * xv[xi];
                               });
                           }
                           if (self.parents.size() > 2) {
                               if (double* g = parent_grad(self, 2)) {
                                   for (std::size_t o = 0; o < co; ++o) {
                                       for (std::size_t i = 0; i < plane; ++i) g[o] += dy[o * plane + i];
                                   }
                               }
                           }
                       });
}

Tensor avg_pool2d(const Tensor& x, std::size_t k, std::size_t stride) {
    const Im2Col geo = make_im2col("avg_pool2d", x, k, stride, 0);
    const std::size_t c = geo.c, h = geo.h, w = geo.w, oh = geo.out_h, ow = geo.out_w;
    const double inv = 1.0 / static_cast<double>(k * k);
    auto for_each = [=](auto&& fn) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t oy = 0; oy < oh; ++oy) {
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    for (std::size_t ky = 0; ky < k; ++ky) {
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            fn((ch * h + oy * stride + ky) * w + ox * stride + kx,
                               (ch * oh + oy) * ow + ox);
                        }
                    }
                }
            }
        }
    };
    std::vector<double> out(c * oh * ow, 0.0);
    const double* xv = x.data().data();
    for_each([&](std::size_t xi, std::size_t oi) { out[oi] += xv[xi] * inv; });
    return make_result("avg_pool2d", {c, oh, ow}, std::move(out), {x}, [for_each, inv](Node& self) {
        if (double* g = parent_grad(self, 0)) {
            for_each([&](std::size_t xi, std::size_t oi) { g[xi] += self.grad[oi] * inv; });
        }
    });
}

Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
    require_rank("resize_bilinear", x, 3);
    if (out_h < 1 || out_w < 1) throw DimensionError("resize_bilinear: empty output");
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);

    struct Tap {
        std::size_t lo, hi;
        double frac;
    };
    auto taps = [](std::size_t in, std::size_t out) {
        std::vector<Tap> t(out);
        const double ratio = static_cast<double>(in) / static_cast<double>(out);
        for (std::size_t i = 0; i < out; ++i) {
            double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
            src = std::clamp(src, 0.0, static_cast<double>(in - 1));
            const auto lo = static_cast<std::size_t>(std::floor(src));
            const std::size_t hi = std::min(lo + 1, in - 1);
            t[i] = {lo, hi, src - static_cast<double>(lo)};
        }
        return t;
    };
    const auto ty = taps(h, out_h);
    const auto tx = taps(w, out_w);

    auto for_each = [=](auto&& fn) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t oy = 0; oy < out_h; ++oy) {
                for (std::size_t ox = 0; ox < out_w; ++ox) {
                    const std::size_t oi = (ch * out_h + oy) * out_w + ox;
                    const auto& a = ty[oy];
                    const auto& b = tx[ox];
                    const std::size_t base = ch * h * w;
                    fn(base + a.lo * w + b.lo, oi, (1 - a.frac) * (1 - b.frac));
                    fn(base + a.lo * w + b.hi, oi, (1 - a.frac) * b.frac);
                    fn(base + a.hi * w + b.lo, oi, a.frac * (1 - b.frac));
                    fn(base + a.hi * w + b.hi, oi, a.frac * b.frac);
                }
            }
        }
    };
    std::vector<double> out(c * out_h * out_w, 0.0);
    const double* xv = x.data().data();
    for_each([&](std::size_t xi, std::size_t oi, double wgt) { out[oi] += wgt * xv[xi]; });
    return make_result("resize_bilinear", {c, out_h, out_w}, std::move(out), {x},
                       [for_each](Node& self) {
                           if (double* g = parent_grad(self, 0)) {
                               for_each([&](std::size_t xi, std::size_t oi, double wgt) {
                                   g[xi] += wgt * self.grad[oi];
                               });
                           }
                       });
}

}  // namespace crowdctx::ops
