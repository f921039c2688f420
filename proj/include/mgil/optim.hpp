#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mgil/tape.hpp"

namespace mgil {

enum class OptimKind { sgd_momentum, adam };

struct OptimConfig {
  OptimKind kind = OptimKind::sgd_momentum;
  double lr = 0.05;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// Cosine decay from lr to 0 over the run; constant lr otherwise.
  bool cosine = true;

  void validate() const;
  bool operator==(const OptimConfig&) const = default;
};

/// First-order optimizer over a fixed parameter list. Moment buffers are
/// created on the first step, one per trainable tensor, in list order.
class Optimizer {
public:
  Optimizer() = default;
  Optimizer(OptimConfig config, std::size_t total_steps);

  /// Learning rate for the next step.
  double current_lr() const;

  /// Applies one update using each trainable tensor's grad buffer.
  void step(const ParamList<float>& params);

  const OptimConfig& config() const { return config_; }
  std::size_t steps_taken() const { return steps_; }
  std::size_t total_steps() const { return total_steps_; }

  /// Buffers for checkpointing: first moments (momentum for SGD), then
  /// second moments (Adam only).
  std::vector<Tensor<float>>& first_moments() { return m_; }
  std::vector<Tensor<float>>& second_moments() { return v_; }
  void restore(std::size_t steps, std::vector<Tensor<float>> first, std::vector<Tensor<float>> second);

private:
  OptimConfig config_;
  std::size_t total_steps_ = 1;
  std::size_t steps_ = 0;
  std::vector<Tensor<float>> m_;
  std::vector<Tensor<float>> v_;
};

const char* to_string(OptimKind kind);

}  // namespace mgil
