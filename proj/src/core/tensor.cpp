#include "crowdctx/core/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

#include "crowdctx/core/errors.hpp"

namespace crowdctx {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor() : node_(std::make_shared<detail::Node>()) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto node = std::make_shared<detail::Node>();
    node->value.assign(shape_numel(shape), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("Tensor::from: shape " + shape_string(shape) + " holds " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({}, {value}, requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                             shape_string(shape()));
    }
    return node_->shape[axis];
}

double Tensor::item() const {
    if (numel() != 1) {
        throw ContractError("item() on tensor of shape " + shape_string(shape()));
    }
    return node_->value[0];
}

std::span<double> Tensor::mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() {
    node_->grad.assign(node_->value.size(), 0.0);
}

Tensor Tensor::clone() const {
    return from(shape(), node_->value, node_->requires_grad);
}

Tensor Tensor::detach() const {
    return from(shape(), node_->value, false);
}

void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward() needs a scalar loss, got shape " +
                            shape_string(loss.shape()));
    }
    auto* root = loss.node().get();
    if (!root->requires_grad) return;

    // Iterative post-order DFS gives a topological order (parents first).
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{root, 0}};
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (auto* node : order) {
        if (node->backward) node->grad.assign(node->value.size(), 0.0);
    }
    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward) (*it)->backward(**it);
    }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_mode_enabled() { return g_grad_enabled; }

namespace detail {

Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<Tensor> parents, std::function<void(Node&)> backward) {
    for (double v : value) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string("non-finite value produced by ") + op);
        }
    }
    auto node = std::make_shared<Node>();
    node->op = op;
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& p : parents) needs = needs || p.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (const auto& p : parents) node->parents.push_back(p.node());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

}  // namespace detail

}  // namespace crowdctx
