#pragma once

#include "mgil/tape.hpp"
#include "mgil/tensor.hpp"

namespace mgil {

/// Space-to-channel transform. Splits every 2x2 spatial block into four
/// interval-sampled maps and concatenates them along channels:
///
///   out[:, 0C:1C] = in[:, :, 0::2, 0::2]
///   out[:, 1C:2C] = in[:, :, 1::2, 0::2]
///   out[:, 2C:3C] = in[:, :, 0::2, 1::2]
///   out[:, 3C:4C] = in[:, :, 1::2, 1::2]
///
/// (N, C, H, W) -> (N, 4C, H/2, W/2). A pure permutation of values; odd H or
/// W is rejected rather than padded.
template <typename Scalar>
Tensor<Scalar> sct_forward(const Tensor<Scalar>& input);

/// Exact inverse of sct_forward; requires C divisible by 4.
template <typename Scalar>
Tensor<Scalar> sct_inverse(const Tensor<Scalar>& input);

namespace ad {
template <typename Scalar>
Var sct(GradTape<Scalar>& tape, Var x);
}

}  // namespace mgil
