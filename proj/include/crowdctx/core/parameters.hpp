#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "crowdctx/core/tensor.hpp"

namespace crowdctx {

struct Parameter {
    std::string name;  // dotted path, e.g. "backbone.layer3.wq"
    Tensor tensor;
};

// Ordered registry of learnable tensors. Insertion order is the
// serialization and optimizer order.
class ParameterStore {
public:
    // Registers a leaf with requires_grad on. Duplicate names throw ContractError.
    Tensor add(const std::string& name, Tensor tensor);

    const Tensor& get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.contains(name); }

    const std::vector<Parameter>& items() const { return params_; }
    std::vector<std::string> names() const;
    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const;

    // Allocates (if needed) and clears every gradient buffer.
    void zero_grad();

private:
    std::vector<Parameter> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Deterministic initializers. All values are rounded to float so that a
// freshly built model survives a checkpoint round trip unchanged.
class Initializer {
public:
    explicit Initializer(std::uint64_t seed) : rng_(seed) {}

    Tensor normal(Shape shape, double stddev);
    // N(0, 1/fan_in)
    Tensor lecun(Shape shape, std::size_t fan_in);
    Tensor constant(Shape shape, double value);

    std::mt19937_64& rng() { return rng_; }

private:
    std::mt19937_64 rng_;
};

inline double round_to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace crowdctx
