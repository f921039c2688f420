#include "mgil/optim.hpp"

#include <cmath>
#include <numbers>

namespace mgil {

const char* to_string(OptimKind kind) { return kind == OptimKind::adam ? "adam" : "sgd_momentum"; }

void OptimConfig::validate() const {
  // lr = 0 is allowed: it freezes the parameters, which is useful as a check.
  require(std::isfinite(lr) && lr >= 0, "optim: lr must be finite and non-negative");
  require(momentum >= 0 && momentum < 1, "optim: momentum must be in [0, 1)");
  require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "optim: betas must be in [0, 1)");
  require(eps > 0, "optim: eps must be positive");
  require(weight_decay >= 0, "optim: weight_decay must be non-negative");
}

Optimizer::Optimizer(OptimConfig config, std::size_t total_steps)
    : config_(config), total_steps_(std::max<std::size_t>(1, total_steps)) {
  config_.validate();
}

double Optimizer::current_lr() const {
  if (!config_.cosine) return config_.lr;
  const double t = std::min(1.0, static_cast<double>(steps_) / static_cast<double>(total_steps_));
  return config_.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

void Optimizer::step(const ParamList<float>& params) {
  std::vector<Tensor<float>*> trainable;
  for (const auto& p : params) {
    if (p.trainable) trainable.push_back(p.tensor);
  }
  if (m_.empty()) {
    for (auto* t : trainable) {
      m_.emplace_back(t->shape());
      if (config_.kind == OptimKind::adam) v_.emplace_back(t->shape());
    }
  }
  require(m_.size() == trainable.size(), "optimizer: parameter list changed between steps");

  const float lr = static_cast<float>(current_lr());
  const float wd = static_cast<float>(config_.weight_decay);
  ++steps_;
  if (config_.kind == OptimKind::sgd_momentum) {
    const float mu = static_cast<float>(config_.momentum);
    for (std::size_t k = 0; k < trainable.size(); ++k) {
      auto value = trainable[k]->data();
      require(trainable[k]->has_grad(), "optimizer: missing gradient buffer");
      auto grad = trainable[k]->grad();
      auto buf = m_[k].data();
      for (std::size_t i = 0; i < value.size(); ++i) {
        const float g = grad[i] + wd * value[i];
        buf[i] = mu * buf[i] + g;
        value[i] -= lr * buf[i];
      }
    }
    return;
  }
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const float eps = static_cast<float>(config_.eps);
  for (std::size_t k = 0; k < trainable.size(); ++k) {
    auto value = trainable[k]->data();
    require(trainable[k]->has_grad(), "optimizer: missing gradient buffer");
    auto grad = trainable[k]->grad();
    auto m = m_[k].data();
    auto v = v_[k].data();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const float g = grad[i] + wd * value[i];
      m[i] = static_cast<float>(b1) * m[i] + static_cast<float>(1 - b1) * g;
      v[i] = static_cast<float>(b2) * v[i] + static_cast<float>(1 - b2) * g * g;
      const float mh = m[i] / static_cast<float>(c1);
      const float vh = v[i] / static_cast<float>(c2);
      value[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
}

void Optimizer::restore(std::size_t steps, std::vector<Tensor<float>> first, std::vector<Tensor<float>> second) {
  steps_ = steps;
  m_ = std::move(first);
  v_ = std::move(second);
}

}  // namespace mgil
