#include "cap/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace cap {

std::size_t ParamSet::add(std::string name, Tensor init) {
    if (has(name)) {
        throw std::invalid_argument("param set: duplicate name '" + name + "'");
    }
    names.push_back(std::move(name));
    values.push_back(std::move(init));
    return values.size() - 1;
}

std::size_t ParamSet::index_of(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (names[i] == name) return i;
    }
    throw std::out_of_range("param set: no parameter named '" + std::string(name) + "'");
}

bool ParamSet::has(std::string_view name) const noexcept {
    for (const auto& n : names) {
        if (n == name) return true;
    }
    return false;
}

std::size_t ParamSet::total_scalars() const noexcept {
    std::size_t total = 0;
    for (const auto& t : values) total += t.numel();
    return total;
}

AdamW::AdamW(AdamWConfig cfg, const ParamSet& params) : cfg_(cfg) {
    if (cfg.lr < 0.0) throw std::invalid_argument("adamw: negative learning rate");
    if (cfg.weight_decay < 0.0) throw std::invalid_argument("adamw: negative weight decay");
    if (cfg.eps <= 0.0) throw std::invalid_argument("adamw: eps must be positive");
    if (cfg.beta1 < 0.0 || cfg.beta1 >= 1.0 || cfg.beta2 < 0.0 || cfg.beta2 >= 1.0) {
        throw std::invalid_argument("adamw: betas must lie in [0, 1)");
    }
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_.push_back(Tensor::zeros(params.at(i).shape));
        v_.push_back(Tensor::zeros(params.at(i).shape));
    }
}

void AdamW::step(ParamSet& params, const std::vector<Tensor>& grads) {
    if (params.size() != m_.size() || grads.size() != m_.size()) {
        throw std::invalid_argument("adamw: parameter/gradient count mismatch");
    }
    t_ += 1;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
    for (std::size_t i = 0; i < m_.size(); ++i) {
        Tensor& p = params.at(i);
        const Tensor& g = grads[i];
        if (!p.same_shape(m_[i]) || !g.same_shape(m_[i])) {
            throw std::invalid_argument("adamw: shape mismatch at parameter '" +
                                        params.name(i) + "'");
        }
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        for (std::size_t j = 0; j < p.numel(); ++j) {
            m.data[j] = cfg_.beta1 * m.data[j] + (1.0 - cfg_.beta1) * g.data[j];
            v.data[j] = cfg_.beta2 * v.data[j] + (1.0 - cfg_.beta2) * g.data[j] * g.data[j];
            const double mhat = m.data[j] / bc1;
            const double vhat = v.data[j] / bc2;
            p.data[j] = p.data[j] * decay - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

} // namespace cap
