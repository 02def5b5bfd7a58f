#pragma once

#include <cstddef>
#include <vector>

#include "crowdctx/core/tensor.hpp"

// Differentiable primitives. Every op checks its shapes (DimensionError) and
// records a backward closure when any input requires grad.
namespace crowdctx::ops {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
// x * s and x / s for a one-element tensor s.
Tensor mul_scalar(const Tensor& x, const Tensor& s);
Tensor div_scalar(const Tensor& x, const Tensor& s);

// x[n, m] + bias[m] on every row.
Tensor add_row(const Tensor& x, const Tensor& bias);
// x[c, ...] * gate[c], one factor per leading-axis slice.
Tensor mul_channels(const Tensor& x, const Tensor& gate);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact erf form
Tensor sigmoid(const Tensor& x);
// Subgradient 0 at x == 0.
Tensor abs(const Tensor& x);

// While alive, records the sign of every relu / abs input in evaluation
// order. Two evaluations with equal patterns lie on the same smooth piece.
class KinkRecorder {
public:
    KinkRecorder();
    ~KinkRecorder();
    KinkRecorder(const KinkRecorder&) = delete;
    KinkRecorder& operator=(const KinkRecorder&) = delete;
    const std::vector<signed char>& pattern() const { return pattern_; }

private:
    std::vector<signed char> pattern_;
    std::vector<signed char>* previous_;
};

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);
// x[n, in] @ w[in, out] + b[out]; bias may be an empty Tensor().
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

// Concatenate along axis 0 (any rank, trailing dims equal).
Tensor concat_rows(const std::vector<Tensor>& parts);
// Concatenate 2-D tensors along axis 1.
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);

// Row-wise softmax with per-row max subtraction.
Tensor softmax_rows(const Tensor& x);
// Row-wise normalization over the last axis of x[n, m].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

struct WindowGeometry {
    std::size_t out_h = 0;
    std::size_t out_w = 0;
};

// Output grid of a k x k window with stride s over an input padded by p on
// every side. Throws DimensionError when the window does not fit.
WindowGeometry window_geometry(std::size_t h, std::size_t w, std::size_t k, std::size_t s,
                               std::size_t p);

// x[c, h, w] -> [out_h * out_w, c * k * k]. Windows are enumerated row-major
// over the output grid; each row is flattened channel-major, then window row,
// then window column. Padding is zero.
Tensor unfold(const Tensor& x, std::size_t k, std::size_t s, std::size_t p);

// x[ci, h, w] * w[co, ci, k, k] + b[co] -> [co, out_h, out_w].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t pad);
// Adjoint of conv2d in x. weight[ci, co, k, k] -> [co, (h-1)s - 2p + k, ...].
Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                        std::size_t stride, std::size_t pad);
// Non-overlapping-or-not average pooling without padding.
Tensor avg_pool2d(const Tensor& x, std::size_t k, std::size_t stride);
// x[c, h, w] -> [c, out_h, out_w], half-pixel-centre bilinear sampling with
// edge clamping.
Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);

}  // namespace crowdctx::ops
