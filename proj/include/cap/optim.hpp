#pragma once

#include "cap/tensor.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace cap {

// Ordered, named parameter collection. Order is registration order and is
// part of the training contract: optimizer state is positional.
struct ParamSet {
    std::vector<std::string> names;
    std::vector<Tensor> values;

    // Returns the parameter's index. Duplicate names are rejected.
    std::size_t add(std::string name, Tensor init);

    std::size_t size() const noexcept { return values.size(); }
    Tensor& at(std::size_t i) { return values.at(i); }
    const Tensor& at(std::size_t i) const { return values.at(i); }
    const std::string& name(std::size_t i) const { return names.at(i); }

    std::size_t index_of(std::string_view name) const; // throws if absent
    bool has(std::string_view name) const noexcept;
    Tensor& find(std::string_view name) { return values[index_of(name)]; }
    const Tensor& find(std::string_view name) const { return values[index_of(name)]; }

    std::size_t total_scalars() const noexcept;
};

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Adaptive-moment optimizer with decoupled weight decay. The decay term
// multiplies parameters by (1 - lr*wd) independent of the gradient-based
// step, so wd shrinks weights even when gradients are zero.
class AdamW {
public:
    // State buffers are sized from the parameter shapes at construction;
    // later steps must present the same shapes.
    AdamW(AdamWConfig cfg, const ParamSet& params);

    // One update over every parameter. grads[i] pairs with params.at(i).
    // lr >= 0 (lr = 0 leaves parameters untouched); negative lr or wd is
    // rejected at construction.
    void step(ParamSet& params, const std::vector<Tensor>& grads);

    std::size_t steps() const noexcept { return t_; }
    const AdamWConfig& config() const noexcept { return cfg_; }

private:
    AdamWConfig cfg_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    std::size_t t_ = 0;
};

} // namespace cap
