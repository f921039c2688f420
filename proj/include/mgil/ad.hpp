#pragma once

// Differentiable wrappers: run the forward primitive, record it on the tape,
// and register the matching backward. Parameters are passed as tensors and
// bound to the tape with GradTape::parameter.

#include <memory>
#include <vector>

#include "mgil/ops.hpp"
#include "mgil/tape.hpp"

namespace mgil::ad {

template <typename Scalar>
Var conv2d(GradTape<Scalar>& tape, Var x, ConvLayer<Scalar>& layer) {
  const Var w = tape.parameter(layer.weight);
  const Var b = tape.parameter(layer.bias);
  const ConvLayer<Scalar>* geometry = &layer;
  return tape.record(mgil::conv2d(tape.value(x), layer), {x, w, b},
                     [x, w, b, geometry](GradTape<Scalar>& t, const Tensor<Scalar>& g) {
                       auto grads = conv2d_backward(g, t.value(x), *geometry);
                       t.accumulate(x, std::move(grads.input));
                       t.accumulate(w, std::move(grads.weight));
                       t.accumulate(b, std::move(grads.bias));
                     });
}

template <typename Scalar>
Var relu(GradTape<Scalar>& tape, Var x) {
  return tape.record(mgil::relu(tape.value(x)), {x}, [x](GradTape<Scalar>& t, const Tensor<Scalar>& g) {
    t.accumulate(x, relu_backward(g, t.value(x)));
  });
}

template <typename Scalar>
Var concat_channels(GradTape<Scalar>& tape, const std::vector<Var>& parts) {
  std::vector<const Tensor<Scalar>*> values;
  std::vector<std::size_t> channels;
  for (Var v : parts) {
    values.push_back(&tape.value(v));
    channels.push_back(tape.value(v).shape().c);
  }
  auto out = mgil::concat_channels<Scalar>(std::span<const Tensor<Scalar>* const>(values));
  return tape.record(std::move(out), parts, [parts, channels](GradTape<Scalar>& t, const Tensor<Scalar>& g) {
    std::size_t begin = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (t.requires_grad(parts[i])) t.accumulate(parts[i], slice_channels(g, begin, channels[i]));
      begin += channels[i];
    }
  });
}

template <typename Scalar>
Var global_avg_pool(GradTape<Scalar>& tape, Var x) {
  const Shape in = tape.value(x).shape();
  return tape.record(mgil::global_avg_pool(tape.value(x)), {x}, [x, in](GradTape<Scalar>& t, const Tensor<Scalar>& g) {
    t.accumulate(x, global_avg_pool_backward(g, in));
  });
}

template <typename Scalar>
Var fully_connected(GradTape<Scalar>& tape, Var x, Tensor<Scalar>& weight, Tensor<Scalar>& bias) {
  const Var w = tape.parameter(weight);
  const Var b = tape.parameter(bias);
  return tape.record(mgil::fully_connected(tape.value(x), weight, bias), {x, w, b},
                     [x, w, b](GradTape<Scalar>& t, const Tensor<Scalar>& g) {
                       auto grads = fully_connected_backward(g, t.value(x), t.value(w));
                       t.accumulate(x, std::move(grads.input));
                       t.accumulate(w, std::move(grads.weight));
                       t.accumulate(b, std::move(grads.bias));
                     });
}

template <typename Scalar>
Var conv1d_channels(GradTape<Scalar>& tape, Var x, Tensor<Scalar>& kernel) {
  const Var k = tape.parameter(kernel);
  return tape.record(mgil::conv1d_channels(tape.value(x), kernel), {x, k},
                     [x, k](GradTape<Scalar>& t, const Tensor<Scalar>& g) {
                       auto grads = conv1d_channels_backward(g, t.value(x), t.value(k));
                       t.accumulate(x, std::move(grads.input));
                       t.accumulate(k, std::move(grads.kernel));
                     });
}

template <typename Scalar>
Var softmax_rows(GradTape<Scalar>& tape, Var x) {
  auto out = mgil::softmax_rows(tape.value(x));
  auto saved = std::make_shared<const Tensor<Scalar>>(out);
  return tape.record(std::move(out), {x}, [x, saved](GradTape<Scalar>& t, const Tensor<Scalar>& g) {
    t.accumulate(x, softmax_rows_backward(g, *saved));
  });
}

template <typename Scalar>
Var add(GradTape<Scalar>& tape, Var a, Var b) {
  return tape.record(mgil::add(tape.value(a), tape.value(b)), {a, b},
                     [a, b](GradTape<Scalar>& t, const Tensor<Scalar>& g) {
                       t.accumulate(a, g);
                       t.accumulate(b, g);
                     });
}

template <typename Scalar>
Var scale(GradTape<Scalar>& tape, Var a, Scalar factor) {
  return tape.record(mgil::scale(tape.value(a), factor), {a}, [a, factor](GradTape<Scalar>& t, const Tensor<Scalar>& g) {
    t.accumulate(a, mgil::scale(g, factor));
  });
}

template <typename Scalar>
Var weighted_sum(GradTape<Scalar>& tape, Var lambda, Var f0, Var f1) {
  return tape.record(mgil::weighted_sum(tape.value(lambda), tape.value(f0), tape.value(f1)), {lambda, f0, f1},
                     [lambda, f0, f1](GradTape<Scalar>& t, const Tensor<Scalar>& g) {
                       auto grads = weighted_sum_backward(g, t.value(lambda), t.value(f0), t.value(f1));
                       t.accumulate(lambda, std::move(grads.lambda));
                       t.accumulate(f0, std::move(grads.f0));
                       t.accumulate(f1, std::move(grads.f1));
                     });
}

template <typename Scalar>
Var max_pool2d(GradTape<Scalar>& tape, Var x) {
  auto result = mgil::max_pool2d(tape.value(x));
  auto argmax = std::make_shared<const std::vector<std::size_t>>(std::move(result.argmax));
  const Shape in = tape.value(x).shape();
  return tape.record(std::move(result.output), {x}, [x, argmax, in](GradTape<Scalar>& t, const Tensor<Scalar>& g) {
    t.accumulate(x, max_pool2d_backward(g, std::span<const std::size_t>(*argmax), in));
  });
}

}  // namespace mgil::ad
