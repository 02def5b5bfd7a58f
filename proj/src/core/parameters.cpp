#include "crowdctx/core/parameters.hpp"

#include <cmath>

#include "crowdctx/core/errors.hpp"

namespace crowdctx {

Tensor ParameterStore::add(const std::string& name, Tensor tensor) {
    if (index_.contains(name)) throw ContractError("duplicate parameter name: " + name);
    tensor.set_requires_grad(true);
    index_.emplace(name, params_.size());
    params_.push_back({name, tensor});
    return tensor;
}

const Tensor& ParameterStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return params_[it->second].tensor;
}

std::vector<std::string> ParameterStore::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.name);
    return out;
}

std::size_t ParameterStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
}

void ParameterStore::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

Tensor Initializer::normal(Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = round_to_float(dist(rng_));
    return Tensor::from(std::move(shape), std::move(v));
}

Tensor Initializer::lecun(Shape shape, std::size_t fan_in) {
    return normal(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

Tensor Initializer::constant(Shape shape, double value) {
    return Tensor::full(std::move(shape), round_to_float(value));
}

}  // namespace crowdctx
