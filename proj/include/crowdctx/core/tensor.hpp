#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace crowdctx {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tensor;

namespace detail {

// One vertex of the computation graph. Leaves have no backward function.
// Interior nodes keep their parents alive until the graph is dropped, so a
// graph lives exactly as long as the tensors that reference it.
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first needed
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

}  // namespace detail

// Dense row-major double-precision array with optional reverse-mode gradient.
// Copies share the underlying node; use clone() for an independent buffer.
class Tensor {
public:
    Tensor();

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const double> data() const { return node_->value; }
    // Direct write access; only meaningful on leaves (parameters, inputs).
    std::span<double> mutable_data() { return node_->value; }
    std::vector<double> to_vector() const { return node_->value; }
    double item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    bool has_grad() const { return node_->grad.size() == node_->value.size() && numel() > 0; }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad();
    void zero_grad();

    // Detached deep copy (leaf, same requires_grad flag, no grad buffer).
    Tensor clone() const;
    // Leaf sharing no graph history with this tensor.
    Tensor detach() const;

    const char* op_name() const { return node_->op; }
    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    // Internal: used by op implementations.
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
// calls; interior gradients are recomputed from scratch each call.
void backward(const Tensor& loss);

// While alive, ops on this thread record no graph.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_mode_enabled();

namespace detail {

// Builds an op output. The node only records parents and the backward
// closure when grad mode is on and at least one parent requires grad.
// Throws NumericError when the forward value is not finite.
Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<Tensor> parents, std::function<void(Node&)> backward);

}  // namespace detail

}  // namespace crowdctx
