#pragma once

#include <cmath>
#include <memory>
#include <span>
#include <vector>

#include "mgil/tape.hpp"

namespace mgil {

/// Mean softmax cross-entropy over the batch. Logits are (N, K, 1, 1).
template <typename Scalar>
Scalar cross_entropy(const Tensor<Scalar>& logits, std::span<const int> labels, Tensor<Scalar>* grad = nullptr) {
  const Shape& s = logits.shape();
  require(s.h == 1 && s.w == 1, "cross_entropy: logits must be (N, K, 1, 1), got " + s.str());
  require(labels.size() == s.n, "cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                                    std::to_string(s.n));
  if (grad != nullptr) *grad = Tensor<Scalar>(s);
  double total = 0;
  for (std::size_t n = 0; n < s.n; ++n) {
    const int label = labels[n];
    require(label >= 0 && static_cast<std::size_t>(label) < s.c, "cross_entropy: label " + std::to_string(label) +
                                                                      " out of range [0, " + std::to_string(s.c) + ")");
    const Scalar* z = logits.plane(n, 0);
    double peak = z[0];
    for (std::size_t k = 1; k < s.c; ++k) peak = std::max<double>(peak, z[k]);
    double sum = 0;
    for (std::size_t k = 0; k < s.c; ++k) sum += std::exp(static_cast<double>(z[k]) - peak);
    const double log_norm = peak + std::log(sum);
    total += log_norm - static_cast<double>(z[label]);
    if (grad != nullptr) {
      for (std::size_t k = 0; k < s.c; ++k) {
        const double p = std::exp(static_cast<double>(z[k]) - log_norm);
        (*grad)(n, k, 0, 0) = static_cast<Scalar>((p - (static_cast<std::size_t>(label) == k ? 1.0 : 0.0)) /
                                                  static_cast<double>(s.n));
      }
    }
  }
  return static_cast<Scalar>(total / static_cast<double>(s.n));
}

/// Mean squared error over every element.
template <typename Scalar>
Scalar mse(const Tensor<Scalar>& pred, const Tensor<Scalar>& target, Tensor<Scalar>* grad = nullptr) {
  require(pred.shape() == target.shape(), "mse: prediction " + pred.shape().str() + " vs target " + target.shape().str());
  if (grad != nullptr) *grad = Tensor<Scalar>(pred.shape());
  const double count = static_cast<double>(pred.size());
  double total = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    total += d * d;
    if (grad != nullptr) (*grad)[i] = static_cast<Scalar>(2.0 * d / count);
  }
  return static_cast<Scalar>(total / count);
}

namespace ad {

template <typename Scalar>
Var cross_entropy(GradTape<Scalar>& tape, Var logits, std::vector<int> labels) {
  auto grad = std::make_shared<Tensor<Scalar>>();
  const Scalar loss = mgil::cross_entropy(tape.value(logits), std::span<const int>(labels), grad.get());
  return tape.record(Tensor<Scalar>(Shape{1, 1, 1, 1}, loss), {logits},
                     [logits, grad](GradTape<Scalar>& t, const Tensor<Scalar>& g) {
                       Tensor<Scalar> scaled = *grad;
                       scaled.array() *= g[0];
                       t.accumulate(logits, std::move(scaled));
                     });
}

template <typename Scalar>
Var mse(GradTape<Scalar>& tape, Var pred, const Tensor<Scalar>& target) {
  auto grad = std::make_shared<Tensor<Scalar>>();
  const Scalar loss = mgil::mse(tape.value(pred), target, grad.get());
  return tape.record(Tensor<Scalar>(Shape{1, 1, 1, 1}, loss), {pred}, [pred, grad](GradTape<Scalar>& t, const Tensor<Scalar>& g) {
    Tensor<Scalar> scaled = *grad;
    scaled.array() *= g[0];
    t.accumulate(pred, std::move(scaled));
  });
}

}  // namespace ad
}  // namespace mgil
