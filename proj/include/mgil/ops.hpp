#pragma once

// Forward and backward primitives on dense N,C,H,W tensors. Every function is
// a pure function of its arguments. Backward functions take the gradient of
// the forward output and return gradients for each differentiable argument.

#include <cstddef>
#include <span>
#include <vector>

#include "mgil/random.hpp"
#include "mgil/tensor.hpp"

namespace mgil {

/// Square-kernel 2D convolution parameters (cross-correlation, no flip) with
/// symmetric zero padding.
template <typename Scalar>
struct ConvLayer {
  Tensor<Scalar> weight;  // (out_channels, in_channels, k, k)
  Tensor<Scalar> bias;    // (out_channels, 1, 1, 1)
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t padding = 0;

  static ConvLayer zeros(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                         std::size_t stride = 1, std::size_t dilation = 1, std::size_t padding = 0) {
    return ConvLayer{Tensor<Scalar>(Shape{out_channels, in_channels, kernel, kernel}),
                     Tensor<Scalar>(Shape{out_channels, 1, 1, 1}), stride, dilation, padding};
  }

  std::size_t out_channels() const { return weight.shape().n; }
  std::size_t in_channels() const { return weight.shape().c; }
  std::size_t kernel() const { return weight.shape().h; }
  /// Span of input covered by one dilated kernel: k + (k - 1)(d - 1).
  std::size_t extent() const { return kernel() + (kernel() - 1) * (dilation - 1); }
};

/// Validates geometry and returns the conv output shape
/// (N, out, (H + 2p - extent) / stride + 1, same for W).
template <typename Scalar>
Shape conv2d_output_shape(const Shape& input, const ConvLayer<Scalar>& layer);

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const ConvLayer<Scalar>& layer);

template <typename Scalar>
struct ConvGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;
};

template <typename Scalar>
ConvGrads<Scalar> conv2d_backward(const Tensor<Scalar>& output_grad, const Tensor<Scalar>& saved_input,
                                  const ConvLayer<Scalar>& layer);

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& input);
/// Passes the gradient where input > 0; the subgradient at 0 is 0.
template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& output_grad, const Tensor<Scalar>& input);

template <typename Scalar>
Tensor<Scalar> concat_channels(std::span<const Tensor<Scalar>* const> parts);
template <typename Scalar>
Tensor<Scalar> concat_channels(const std::vector<Tensor<Scalar>>& parts);
template <typename Scalar>
Tensor<Scalar> slice_channels(const Tensor<Scalar>& input, std::size_t begin, std::size_t count);

/// (N, C, H, W) -> (N, C, 1, 1) spatial mean.
template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& input);
template <typename Scalar>
Tensor<Scalar> global_avg_pool_backward(const Tensor<Scalar>& output_grad, const Shape& input_shape);

/// y = W x + b per batch row. Input (N, C, 1, 1), weight (out, C, 1, 1),
/// bias (out, 1, 1, 1).
template <typename Scalar>
Tensor<Scalar> fully_connected(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                               const Tensor<Scalar>& bias);

template <typename Scalar>
struct LinearGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;
};

template <typename Scalar>
LinearGrads<Scalar> fully_connected_backward(const Tensor<Scalar>& output_grad, const Tensor<Scalar>& input,
                                             const Tensor<Scalar>& weight);

/// Shared-kernel 1D cross-correlation along the channel axis of an (N, L, 1, 1)
/// tensor, zero padded by (k - 1) / 2 so the length is preserved. The kernel
/// is stored as (1, 1, 1, k) with k odd.
template <typename Scalar>
Tensor<Scalar> conv1d_channels(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel);

template <typename Scalar>
struct Conv1dGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> kernel;
};

template <typename Scalar>
Conv1dGrads<Scalar> conv1d_channels_backward(const Tensor<Scalar>& output_grad, const Tensor<Scalar>& input,
                                             const Tensor<Scalar>& kernel);

/// Row-wise softmax over the channel axis of an (N, m, 1, 1) tensor.
template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& input);
template <typename Scalar>
Tensor<Scalar> softmax_rows_backward(const Tensor<Scalar>& output_grad, const Tensor<Scalar>& output);

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor);

/// out = lambda[n, 0] * f0 + lambda[n, 1] * f1, lambda shaped (N, 2, 1, 1).
template <typename Scalar>
Tensor<Scalar> weighted_sum(const Tensor<Scalar>& lambda, const Tensor<Scalar>& f0, const Tensor<Scalar>& f1);

template <typename Scalar>
struct WeightedSumGrads {
  Tensor<Scalar> lambda;
  Tensor<Scalar> f0;
  Tensor<Scalar> f1;
};

template <typename Scalar>
WeightedSumGrads<Scalar> weighted_sum_backward(const Tensor<Scalar>& output_grad, const Tensor<Scalar>& lambda,
                                               const Tensor<Scalar>& f0, const Tensor<Scalar>& f1);

template <typename Scalar>
struct MaxPoolResult {
  Tensor<Scalar> output;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

/// 2x2 window, stride 2. Ties resolve to the lowest flat input index.
template <typename Scalar>
MaxPoolResult<Scalar> max_pool2d(const Tensor<Scalar>& input);
template <typename Scalar>
Tensor<Scalar> max_pool2d_backward(const Tensor<Scalar>& output_grad, std::span<const std::size_t> argmax,
                                   const Shape& input_shape);

/// Per-channel batch normalization using batch statistics over N, H, W.
template <typename Scalar>
struct BatchNormResult {
  Tensor<Scalar> output;
  Tensor<Scalar> normalized;      // x_hat
  std::vector<Scalar> mean;       // per channel
  std::vector<Scalar> variance;   // biased, per channel
  std::vector<Scalar> inv_std;    // 1 / sqrt(var + eps)
};

template <typename Scalar>
BatchNormResult<Scalar> batch_norm_train(const Tensor<Scalar>& input, const Tensor<Scalar>& gamma,
                                         const Tensor<Scalar>& beta, Scalar eps);

template <typename Scalar>
Tensor<Scalar> batch_norm_eval(const Tensor<Scalar>& input, const Tensor<Scalar>& gamma,
                               const Tensor<Scalar>& beta, const Tensor<Scalar>& running_mean,
                               const Tensor<Scalar>& running_var, Scalar eps);

template <typename Scalar>
struct BatchNormGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
};

template <typename Scalar>
BatchNormGrads<Scalar> batch_norm_train_backward(const Tensor<Scalar>& output_grad,
                                                 const BatchNormResult<Scalar>& saved,
                                                 const Tensor<Scalar>& gamma);

template <typename Scalar>
BatchNormGrads<Scalar> batch_norm_eval_backward(const Tensor<Scalar>& output_grad, const Tensor<Scalar>& input,
                                                const Tensor<Scalar>& gamma, const Tensor<Scalar>& running_mean,
                                                const Tensor<Scalar>& running_var, Scalar eps);

/// Fan-in scaled uniform init, bound sqrt(6 / fan_in).
template <typename Scalar>
void he_uniform(Tensor<Scalar>& t, std::size_t fan_in, Rng& rng);

}  // namespace mgil
