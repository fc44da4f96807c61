#include "slidepipe/nn/optim.hpp"

#include <cmath>

namespace slidepipe::nn {

Sgd::Sgd(std::vector<Tensor> params, double lr, double momentum, double weight_decay)
    : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
    velocity_.reserve(params_.size());
    for (const auto& p : params_)
        velocity_.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
}

void Sgd::step() {
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& p = params_[k];
        auto& vel = velocity_[k];
        const auto g = p.grad();
        auto& val = p.values();
        for (std::size_t i = 0; i < val.size(); ++i) {
            const double grad = g[i] + weight_decay_ * val[i];
            vel[i] = momentum_ * vel[i] + grad;
            val[i] -= lr_ * vel[i];
        }
    }
}

void Sgd::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps,
           double weight_decay)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps),
      weight_decay_(weight_decay) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& p = params_[k];
        const auto g = p.grad();
        auto& val = p.values();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < val.size(); ++i) {
            const double grad = g[i] + weight_decay_ * val[i];
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * grad;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * grad * grad;
            val[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
        }
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

} // namespace slidepipe::nn
