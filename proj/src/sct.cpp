#include "mgil/sct.hpp"

#include <string>

namespace mgil {

namespace {
// (row, col) start offset of sampling phase b.
constexpr std::size_t kRow[4] = {0, 1, 0, 1};
constexpr std::size_t kCol[4] = {0, 0, 1, 1};
}  // namespace

template <typename Scalar>
Tensor<Scalar> sct_forward(const Tensor<Scalar>& input) {
  const Shape& s = input.shape();
  if (s.h < 2 || s.w < 2 || s.h % 2 != 0 || s.w % 2 != 0) {
    throw ContractViolation("sct_forward: H and W must be even and >= 2, got " + s.str() +
                            "; pad the input to even size before downsampling");
  }
  const std::size_t h2 = s.h / 2, w2 = s.w / 2;
  Tensor<Scalar> out(Shape{s.n, 4 * s.c, h2, w2});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t b = 0; b < 4; ++b) {
      for (std::size_t c = 0; c < s.c; ++c) {
        const Scalar* src = input.plane(n, c);
        Scalar* dst = out.plane(n, b * s.c + c);
        for (std::size_t i = 0; i < h2; ++i) {
          const Scalar* row = src + (2 * i + kRow[b]) * s.w + kCol[b];
          for (std::size_t j = 0; j < w2; ++j) dst[i * w2 + j] = row[2 * j];
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> sct_inverse(const Tensor<Scalar>& input) {
  const Shape& s = input.shape();
  if (s.c % 4 != 0) {
    throw ContractViolation("sct_inverse: C must be divisible by 4, got " + std::to_string(s.c));
  }
  const std::size_t c4 = s.c / 4;
  Tensor<Scalar> out(Shape{s.n, c4, 2 * s.h, 2 * s.w});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t b = 0; b < 4; ++b) {
      for (std::size_t c = 0; c < c4; ++c) {
        const Scalar* src = input.plane(n, b * c4 + c);
        Scalar* dst = out.plane(n, c);
        for (std::size_t i = 0; i < s.h; ++i) {
          Scalar* row = dst + (2 * i + kRow[b]) * (2 * s.w) + kCol[b];
          for (std::size_t j = 0; j < s.w; ++j) row[2 * j] = src[i * s.w + j];
        }
      }
    }
  }
  return out;
}

namespace ad {
template <typename Scalar>
Var sct(GradTape<Scalar>& tape, Var x) {
  return tape.record(sct_forward(tape.value(x)), {x}, [x](GradTape<Scalar>& t, const Tensor<Scalar>& g) {
    t.accumulate(x, sct_inverse(g));
  });
}
template Var sct(GradTape<float>&, Var);
template Var sct(GradTape<double>&, Var);
}  // namespace ad

template Tensor<float> sct_forward(const Tensor<float>&);
template Tensor<double> sct_forward(const Tensor<double>&);
template Tensor<float> sct_inverse(const Tensor<float>&);
template Tensor<double> sct_inverse(const Tensor<double>&);

}  // namespace mgil
