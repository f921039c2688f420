#include "mgil/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Dense>

#include "mgil/parallel.hpp"

namespace mgil {

namespace {

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = std::ptrdiff_t;

void require_shape(const Shape& actual, const Shape& expected, const char* what) {
  if (actual == expected) return;
  const char* dim = actual.n != expected.n ? "N" : actual.c != expected.c ? "C" : actual.h != expected.h ? "H" : "W";
  throw ContractViolation(std::string(what) + ": dimension " + dim + " mismatch, got " + actual.str() +
                          ", expected " + expected.str());
}

// Valid output index range [lo, hi) along one axis for kernel tap `offset`
// (= tap * dilation - padding): the input index o * stride + offset must lie
// in [0, in_size).
std::pair<Index, Index> tap_range(Index offset, Index stride, Index in_size, Index out_size) {
  Index lo = 0;
  if (offset < 0) lo = (-offset + stride - 1) / stride;
  Index hi = out_size;
  const Index last = in_size - 1 - offset;
  if (last < 0) return {0, 0};
  hi = std::min(hi, last / stride + 1);
  return {lo, std::max(lo, hi)};
}

template <typename Scalar>
void im2col(const Scalar* in, const Shape& is, const ConvLayer<Scalar>& layer, const Shape& os,
            RowMat<Scalar>& col) {
  const Index k = static_cast<Index>(layer.kernel());
  const Index s = static_cast<Index>(layer.stride);
  const Index d = static_cast<Index>(layer.dilation);
  const Index p = static_cast<Index>(layer.padding);
  const Index H = static_cast<Index>(is.h), W = static_cast<Index>(is.w);
  const Index Ho = static_cast<Index>(os.h), Wo = static_cast<Index>(os.w);
  col.setZero();
  for (Index ci = 0; ci < static_cast<Index>(is.c); ++ci) {
    const Scalar* plane = in + ci * H * W;
    for (Index kh = 0; kh < k; ++kh) {
      const auto [oh_lo, oh_hi] = tap_range(kh * d - p, s, H, Ho);
      for (Index kw = 0; kw < k; ++kw) {
        const auto [ow_lo, ow_hi] = tap_range(kw * d - p, s, W, Wo);
        Scalar* row = col.data() + ((ci * k + kh) * k + kw) * Ho * Wo;
        for (Index oh = oh_lo; oh < oh_hi; ++oh) {
          const Scalar* src = plane + (oh * s + kh * d - p) * W + kw * d - p;
          for (Index ow = ow_lo; ow < ow_hi; ++ow) row[oh * Wo + ow] = src[ow * s];
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const RowMat<Scalar>& col, const Shape& is, const ConvLayer<Scalar>& layer, const Shape& os,
                Scalar* out) {
  const Index k = static_cast<Index>(layer.kernel());
  const Index s = static_cast<Index>(layer.stride);
  const Index d = static_cast<Index>(layer.dilation);
  const Index p = static_cast<Index>(layer.padding);
  const Index H = static_cast<Index>(is.h), W = static_cast<Index>(is.w);
  const Index Ho = static_cast<Index>(os.h), Wo = static_cast<Index>(os.w);
  for (Index ci = 0; ci < static_cast<Index>(is.c); ++ci) {
    Scalar* plane = out + ci * H * W;
    for (Index kh = 0; kh < k; ++kh) {
      const auto [oh_lo, oh_hi] = tap_range(kh * d - p, s, H, Ho);
      for (Index kw = 0; kw < k; ++kw) {
        const auto [ow_lo, ow_hi] = tap_range(kw * d - p, s, W, Wo);
        const Scalar* row = col.data() + ((ci * k + kh) * k + kw) * Ho * Wo;
        for (Index oh = oh_lo; oh < oh_hi; ++oh) {
          Scalar* dst = plane + (oh * s + kh * d - p) * W + kw * d - p;
          for (Index ow = ow_lo; ow < ow_hi; ++ow) dst[ow * s] += row[oh * Wo + ow];
        }
      }
    }
  }
}

void require_vector(const Shape& s, const char* what) {
  if (s.h != 1 || s.w != 1) {
    throw ContractViolation(std::string(what) + ": expected (N, C, 1, 1), got " + s.str());
  }
}

}  // namespace

template <typename Scalar>
Shape conv2d_output_shape(const Shape& input, const ConvLayer<Scalar>& layer) {
  const Shape& ws = layer.weight.shape();
  require(ws.h == ws.w, "conv2d: kernel must be square, got " + std::to_string(ws.h) + "x" + std::to_string(ws.w));
  require(ws.h >= 1, "conv2d: empty kernel");
  require(layer.stride >= 1, "conv2d: stride must be positive");
  require(layer.dilation >= 1, "conv2d: dilation must be positive");
  require(layer.bias.shape() == Shape{ws.n, 1, 1, 1},
          "conv2d: bias shape " + layer.bias.shape().str() + " does not match out_channels " + std::to_string(ws.n));
  require(input.n >= 1 && input.c >= 1 && input.h >= 1 && input.w >= 1,
          "conv2d: input shape " + input.str() + " has an empty dimension");
  if (input.c != ws.c) {
    throw ContractViolation("conv2d: dimension C mismatch, input has " + std::to_string(input.c) +
                            " channels but layer expects " + std::to_string(ws.c));
  }
  const std::size_t ext = layer.extent();
  const std::size_t ph = input.h + 2 * layer.padding;
  const std::size_t pw = input.w + 2 * layer.padding;
  if (ext > ph) {
    throw ContractViolation("conv2d: dimension H too small, kernel extent " + std::to_string(ext) +
                            " exceeds padded height " + std::to_string(ph));
  }
  if (ext > pw) {
    throw ContractViolation("conv2d: dimension W too small, kernel extent " + std::to_string(ext) +
                            " exceeds padded width " + std::to_string(pw));
  }
  return Shape{input.n, ws.n, (ph - ext) / layer.stride + 1, (pw - ext) / layer.stride + 1};
}

namespace {

// out[co][q] = sum over r of w[co][r] * col[r][q], summed in increasing r from
// zero. Tiles of kCo x kQ outputs stay in registers; each element still sees
// its terms in the same order. Zero columns from padding add +0, which leaves
// every partial sum unchanged.
template <typename Scalar>
void gemm_ordered(const Scalar* w, const Scalar* col, Scalar* out, Index Co, Index R, Index Q) {
  constexpr Index kCo = 4;
  constexpr Index kQ = 64 / sizeof(Scalar);
  // Fixed-size Eigen tiles: plain arrays with runtime trip counts were left
  // scalar by the compiler.
  using Tile = Eigen::Array<Scalar, kQ, kCo>;
  using Vec = Eigen::Array<Scalar, kQ, 1>;
  Index co = 0;
  for (; co + kCo <= Co; co += kCo) {
    const Scalar* w0 = w + co * R;
    Index q = 0;
    for (; q + kQ <= Q; q += kQ) {
      Tile acc = Tile::Zero();
      for (Index r = 0; r < R; ++r) {
        const Vec c = Eigen::Map<const Vec>(col + r * Q + q);
        acc.col(0) += w0[r] * c;
        acc.col(1) += w0[R + r] * c;
        acc.col(2) += w0[2 * R + r] * c;
        acc.col(3) += w0[3 * R + r] * c;
      }
      for (Index a = 0; a < kCo; ++a) Eigen::Map<Vec>(out + (co + a) * Q + q) = acc.col(a);
    }
    for (; q < Q; ++q) {
      Scalar acc[kCo] = {};
      for (Index r = 0; r < R; ++r)
        for (Index a = 0; a < kCo; ++a) acc[a] += w0[a * R + r] * col[r * Q + q];
      for (Index a = 0; a < kCo; ++a) out[(co + a) * Q + q] = acc[a];
    }
  }
  for (; co < Co; ++co) {
    Scalar* dst = out + co * Q;
    std::fill(dst, dst + Q, Scalar(0));
    for (Index r = 0; r < R; ++r) {
      const Scalar wv = w[co * R + r];
      const Scalar* c = col + r * Q;
      for (Index q = 0; q < Q; ++q) dst[q] += wv * c[q];
    }
  }
}

}  // namespace

// Each output element accumulates its taps in (ci, kh, kw) order starting from
// zero and adds the bias last, the same order as a textbook nested loop.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const ConvLayer<Scalar>& layer) {
  const Shape os = conv2d_output_shape(input.shape(), layer);
  const Shape& is = input.shape();
  Tensor<Scalar> out(os);
  const Index R = static_cast<Index>(is.c * layer.kernel() * layer.kernel());
  const Index Q = static_cast<Index>(os.plane());
  const Index Co = static_cast<Index>(os.c);
  const Scalar* weight = layer.weight.data().data();

  parallel_for(os.n, [&](std::size_t n) {
    thread_local RowMat<Scalar> col;
    col.resize(R, Q);
    im2col(input.plane(n, 0), is, layer, os, col);
    Scalar* dst = out.plane(n, 0);
    gemm_ordered(weight, col.data(), dst, Co, R, Q);
    for (Index co = 0; co < Co; ++co) {
      const Scalar b = layer.bias[static_cast<std::size_t>(co)];
      for (Index q = 0; q < Q; ++q) dst[co * Q + q] += b;
    }
  });
  return out;
}

template <typename Scalar>
ConvGrads<Scalar> conv2d_backward(const Tensor<Scalar>& output_grad, const Tensor<Scalar>& saved_input,
                                  const ConvLayer<Scalar>& layer) {
  const Shape os = conv2d_output_shape(saved_input.shape(), layer);
  require_shape(output_grad.shape(), os, "conv2d_backward: output_grad");
  const Shape& is = saved_input.shape();
  const Index K = static_cast<Index>(is.c * layer.kernel() * layer.kernel());
  const Index P = static_cast<Index>(os.plane());
  const Index Co = static_cast<Index>(os.c);

  ConvGrads<Scalar> g{Tensor<Scalar>(is), Tensor<Scalar>(layer.weight.shape()), Tensor<Scalar>(layer.bias.shape())};
  Eigen::Map<const RowMat<Scalar>> weight(layer.weight.data().data(), Co, K);
  Eigen::Map<RowMat<Scalar>> dweight(g.weight.data().data(), Co, K);
  Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> dbias(g.bias.data().data(), Co);

  RowMat<Scalar> col(K, P);
  RowMat<Scalar> dcol(K, P);
  for (std::size_t n = 0; n < os.n; ++n) {
    Eigen::Map<const RowMat<Scalar>> grad(output_grad.plane(n, 0), Co, P);
    im2col(saved_input.plane(n, 0), is, layer, os, col);
    dweight.noalias() += grad * col.transpose();
    dbias += grad.rowwise().sum();
    dcol.noalias() = weight.transpose() * grad;
    col2im_add(dcol, is, layer, os, g.input.plane(n, 0));
  }
  return g;
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& input) {
  Tensor<Scalar> out(input.shape());
  out.array() = input.array().max(Scalar(0));
  return out;
}

template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& output_grad, const Tensor<Scalar>& input) {
  require_shape(output_grad.shape(), input.shape(), "relu_backward");
  Tensor<Scalar> g(input.shape());
  g.array() = (input.array() > Scalar(0)).select(output_grad.array(), Scalar(0));
  return g;
}

template <typename Scalar>
Tensor<Scalar> concat_channels(std::span<const Tensor<Scalar>* const> parts) {
  require(!parts.empty(), "concat_channels: no parts");
  const Shape& first = parts.front()->shape();
  std::size_t channels = 0;
  for (const auto* part : parts) {
    const Shape& s = part->shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ContractViolation("concat_channels: part shape " + s.str() + " does not share N/H/W with " + first.str());
    }
    channels += s.c;
  }
  Tensor<Scalar> out(Shape{first.n, channels, first.h, first.w});
  const std::size_t plane = first.plane();
  for (std::size_t n = 0; n < first.n; ++n) {
    Scalar* dst = out.plane(n, 0);
    for (const auto* part : parts) {
      const std::size_t count = part->shape().c * plane;
      std::copy_n(part->plane(n, 0), count, dst);
      dst += count;
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> concat_channels(const std::vector<Tensor<Scalar>>& parts) {
  std::vector<const Tensor<Scalar>*> ptrs;
  ptrs.reserve(parts.size());
  for (const auto& p : parts) ptrs.push_back(&p);
  return concat_channels<Scalar>(std::span<const Tensor<Scalar>* const>(ptrs));
}

template <typename Scalar>
Tensor<Scalar> slice_channels(const Tensor<Scalar>& input, std::size_t begin, std::size_t count) {
  const Shape& s = input.shape();
  require(begin + count <= s.c, "slice_channels: range [" + std::to_string(begin) + ", " +
                                    std::to_string(begin + count) + ") exceeds C=" + std::to_string(s.c));
  Tensor<Scalar> out(Shape{s.n, count, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n) std::copy_n(input.plane(n, begin), count * s.plane(), out.plane(n, 0));
  return out;
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& input) {
  const Shape& s = input.shape();
  require(s.h >= 1 && s.w >= 1, "global_avg_pool: empty spatial extent in " + s.str());
  Tensor<Scalar> out(Shape{s.n, s.c, 1, 1});
  const std::size_t plane = s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const Scalar* src = input.plane(n, c);
      double sum = 0;
      for (std::size_t i = 0; i < plane; ++i) sum += src[i];
      out(n, c, 0, 0) = static_cast<Scalar>(sum / static_cast<double>(plane));
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool_backward(const Tensor<Scalar>& output_grad, const Shape& input_shape) {
  require_shape(output_grad.shape(), Shape{input_shape.n, input_shape.c, 1, 1}, "global_avg_pool_backward");
  Tensor<Scalar> g(input_shape);
  const Scalar inv = Scalar(1) / static_cast<Scalar>(input_shape.plane());
  for (std::size_t n = 0; n < input_shape.n; ++n) {
    for (std::size_t c = 0; c < input_shape.c; ++c) {
      std::fill_n(g.plane(n, c), input_shape.plane(), output_grad(n, c, 0, 0) * inv);
    }
  }
  return g;
}

template <typename Scalar>
Tensor<Scalar> fully_connected(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias) {
  const Shape& s = input.shape();
  const Shape& ws = weight.shape();
  require(ws.h == 1 && ws.w == 1, "fully_connected: weight must be (out, in, 1, 1), got " + ws.str());
  const std::size_t in = s.c * s.h * s.w;
  if (in != ws.c) {
    throw ContractViolation("fully_connected: dimension C mismatch, input has " + std::to_string(in) +
                            " features but weight expects " + std::to_string(ws.c));
  }
  require(bias.shape() == Shape{ws.n, 1, 1, 1}, "fully_connected: bias shape " + bias.shape().str());
  Tensor<Scalar> out(Shape{s.n, ws.n, 1, 1});
  const auto N = static_cast<Index>(s.n), I = static_cast<Index>(in), O = static_cast<Index>(ws.n);
  Eigen::Map<const RowMat<Scalar>> x(input.data().data(), N, I);
  Eigen::Map<const RowMat<Scalar>> w(weight.data().data(), O, I);
  Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> b(bias.data().data(), O);
  Eigen::Map<RowMat<Scalar>> y(out.data().data(), N, O);
  // One matrix-vector product per sample, so a row never depends on the
  // batch size through the GEMM blocking.
  for (Index n = 0; n < N; ++n) {
    y.row(n).noalias() = x.row(n) * w.transpose();
    y.row(n) += b;
  }
  return out;
}

template <typename Scalar>
LinearGrads<Scalar> fully_connected_backward(const Tensor<Scalar>& output_grad, const Tensor<Scalar>& input,
                                             const Tensor<Scalar>& weight) {
  const Shape& s = input.shape();
  const Shape& ws = weight.shape();
  const auto N = static_cast<Index>(s.n), I = static_cast<Index>(ws.c), O = static_cast<Index>(ws.n);
  require_shape(output_grad.shape(), Shape{s.n, ws.n, 1, 1}, "fully_connected_backward");
  require(s.c * s.h * s.w == ws.c, "fully_connected_backward: input features do not match weight");
  LinearGrads<Scalar> g{Tensor<Scalar>(s), Tensor<Scalar>(ws), Tensor<Scalar>(Shape{ws.n, 1, 1, 1})};
  Eigen::Map<const RowMat<Scalar>> x(input.data().data(), N, I);
  Eigen::Map<const RowMat<Scalar>> w(weight.data().data(), O, I);
  Eigen::Map<const RowMat<Scalar>> gy(output_grad.data().data(), N, O);
  Eigen::Map<RowMat<Scalar>>(g.input.data().data(), N, I).noalias() = gy * w;
  Eigen::Map<RowMat<Scalar>>(g.weight.data().data(), O, I).noalias() = gy.transpose() * x;
  Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(g.bias.data().data(), O) = gy.colwise().sum();
  return g;
}

template <typename Scalar>
Tensor<Scalar> conv1d_channels(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel) {
  require_vector(input.shape(), "conv1d_channels");
  const std::size_t k = kernel.size();
  require(kernel.shape() == Shape{1, 1, 1, k}, "conv1d_channels: kernel must be (1, 1, 1, k), got " + kernel.shape().str());
  if (k % 2 == 0) throw ContractViolation("conv1d_channels: kernel size " + std::to_string(k) + " is even");
  const Index L = static_cast<Index>(input.shape().c);
  require(static_cast<Index>(k) <= L, "conv1d_channels: kernel size " + std::to_string(k) +
                                          " exceeds channel length " + std::to_string(L));
  const Index half = static_cast<Index>(k / 2);
  Tensor<Scalar> out(input.shape());
  for (std::size_t n = 0; n < input.shape().n; ++n) {
    const Scalar* x = input.plane(n, 0);
    Scalar* y = out.plane(n, 0);
    for (Index i = 0; i < L; ++i) {
      Scalar acc = 0;
      for (Index j = 0; j < static_cast<Index>(k); ++j) {
        const Index src = i + j - half;
        if (src >= 0 && src < L) acc += kernel[static_cast<std::size_t>(j)] * x[src];
      }
      y[i] = acc;
    }
  }
  return out;
}

template <typename Scalar>
Conv1dGrads<Scalar> conv1d_channels_backward(const Tensor<Scalar>& output_grad, const Tensor<Scalar>& input,
                                             const Tensor<Scalar>& kernel) {
  require_shape(output_grad.shape(), input.shape(), "conv1d_channels_backward");
  const std::size_t k = kernel.size();
  const Index L = static_cast<Index>(input.shape().c);
  const Index half = static_cast<Index>(k / 2);
  Conv1dGrads<Scalar> g{Tensor<Scalar>(input.shape()), Tensor<Scalar>(kernel.shape())};
  for (std::size_t n = 0; n < input.shape().n; ++n) {
    const Scalar* x = input.plane(n, 0);
    const Scalar* gy = output_grad.plane(n, 0);
    Scalar* gx = g.input.plane(n, 0);
    for (Index i = 0; i < L; ++i) {
      for (Index j = 0; j < static_cast<Index>(k); ++j) {
        const Index src = i + j - half;
        if (src < 0 || src >= L) continue;
        gx[src] += kernel[static_cast<std::size_t>(j)] * gy[i];
        g.kernel[static_cast<std::size_t>(j)] += gy[i] * x[src];
      }
    }
  }
  return g;
}

template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& input) {
  require_vector(input.shape(), "softmax_rows");
  const std::size_t m = input.shape().c;
  Tensor<Scalar> out(input.shape());
  for (std::size_t n = 0; n < input.shape().n; ++n) {
    const Scalar* x = input.plane(n, 0);
    Scalar* y = out.plane(n, 0);
    Scalar peak = -std::numeric_limits<Scalar>::infinity();
    for (std::size_t i = 0; i < m; ++i) {
      if (!std::isfinite(x[i])) throw NonFiniteInput("softmax_rows: non-finite input at row " + std::to_string(n));
      peak = std::max(peak, x[i]);
    }
    Scalar total = 0;
    for (std::size_t i = 0; i < m; ++i) {
      y[i] = std::exp(x[i] - peak);
      total += y[i];
    }
    for (std::size_t i = 0; i < m; ++i) y[i] /= total;
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> softmax_rows_backward(const Tensor<Scalar>& output_grad, const Tensor<Scalar>& output) {
  require_shape(output_grad.shape(), output.shape(), "softmax_rows_backward");
  const std::size_t m = output.shape().c;
  Tensor<Scalar> g(output.shape());
  for (std::size_t n = 0; n < output.shape().n; ++n) {
    const Scalar* y = output.plane(n, 0);
    const Scalar* gy = output_grad.plane(n, 0);
    Scalar dot = 0;
    for (std::size_t i = 0; i < m; ++i) dot += gy[i] * y[i];
    for (std::size_t i = 0; i < m; ++i) g(n, i, 0, 0) = y[i] * (gy[i] - dot);
  }
  return g;
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_shape(b.shape(), a.shape(), "add");
  Tensor<Scalar> out(a.shape());
  out.array() = a.array() + b.array();
  return out;
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor) {
  Tensor<Scalar> out(a.shape());
  out.array() = a.array() * factor;
  return out;
}

template <typename Scalar>
Tensor<Scalar> weighted_sum(const Tensor<Scalar>& lambda, const Tensor<Scalar>& f0, const Tensor<Scalar>& f1) {
  require_shape(f1.shape(), f0.shape(), "weighted_sum: f1");
  require_shape(lambda.shape(), Shape{f0.shape().n, 2, 1, 1}, "weighted_sum: lambda");
  Tensor<Scalar> out(f0.shape());
  const std::size_t per = f0.shape().c * f0.shape().plane();
  for (std::size_t n = 0; n < f0.shape().n; ++n) {
    const Scalar l0 = lambda(n, 0, 0, 0), l1 = lambda(n, 1, 0, 0);
    const Scalar* a = f0.plane(n, 0);
    const Scalar* b = f1.plane(n, 0);
    Scalar* y = out.plane(n, 0);
    for (std::size_t i = 0; i < per; ++i) y[i] = l0 * a[i] + l1 * b[i];
  }
  return out;
}

template <typename Scalar>
WeightedSumGrads<Scalar> weighted_sum_backward(const Tensor<Scalar>& output_grad, const Tensor<Scalar>& lambda,
                                               const Tensor<Scalar>& f0, const Tensor<Scalar>& f1) {
  require_shape(output_grad.shape(), f0.shape(), "weighted_sum_backward");
  WeightedSumGrads<Scalar> g{Tensor<Scalar>(lambda.shape()), Tensor<Scalar>(f0.shape()), Tensor<Scalar>(f1.shape())};
  const std::size_t per = f0.shape().c * f0.shape().plane();
  for (std::size_t n = 0; n < f0.shape().n; ++n) {
    const Scalar l0 = lambda(n, 0, 0, 0), l1 = lambda(n, 1, 0, 0);
    const Scalar* gy = output_grad.plane(n, 0);
    const Scalar* a = f0.plane(n, 0);
    const Scalar* b = f1.plane(n, 0);
    Scalar* ga = g.f0.plane(n, 0);
    Scalar* gb = g.f1.plane(n, 0);
    Scalar d0 = 0, d1 = 0;
    for (std::size_t i = 0; i < per; ++i) {
      d0 += gy[i] * a[i];
      d1 += gy[i] * b[i];
      ga[i] = l0 * gy[i];
      gb[i] = l1 * gy[i];
    }
    g.lambda(n, 0, 0, 0) = d0;
    g.lambda(n, 1, 0, 0) = d1;
  }
  return g;
}

template <typename Scalar>
MaxPoolResult<Scalar> max_pool2d(const Tensor<Scalar>& input) {
  const Shape& s = input.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ContractViolation("max_pool2d: H and W must be even, got " + s.str());
  }
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  MaxPoolResult<Scalar> r{Tensor<Scalar>(os), std::vector<std::size_t>(os.size())};
  std::size_t o = 0;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t oh = 0; oh < os.h; ++oh) {
        for (std::size_t ow = 0; ow < os.w; ++ow, ++o) {
          std::size_t best = input.index(n, c, 2 * oh, 2 * ow);
          for (std::size_t dh = 0; dh < 2; ++dh) {
            for (std::size_t dw = 0; dw < 2; ++dw) {
              const std::size_t idx = input.index(n, c, 2 * oh + dh, 2 * ow + dw);
              if (input[idx] > input[best]) best = idx;
            }
          }
          r.output[o] = input[best];
          r.argmax[o] = best;
        }
      }
    }
  }
  return r;
}

template <typename Scalar>
Tensor<Scalar> max_pool2d_backward(const Tensor<Scalar>& output_grad, std::span<const std::size_t> argmax,
                                   const Shape& input_shape) {
  require(argmax.size() == output_grad.size(), "max_pool2d_backward: argmax length does not match output_grad");
  Tensor<Scalar> g(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += output_grad[i];
  return g;
}

template <typename Scalar>
BatchNormResult<Scalar> batch_norm_train(const Tensor<Scalar>& input, const Tensor<Scalar>& gamma,
                                         const Tensor<Scalar>& beta, Scalar eps) {
  const Shape& s = input.shape();
  require(gamma.size() == s.c && beta.size() == s.c,
          "batch_norm: dimension C mismatch, input has " + std::to_string(s.c) + " channels, affine has " +
              std::to_string(gamma.size()));
  const std::size_t plane = s.plane();
  const double count = static_cast<double>(s.n * plane);
  BatchNormResult<Scalar> r{Tensor<Scalar>(s), Tensor<Scalar>(s), std::vector<Scalar>(s.c),
                            std::vector<Scalar>(s.c), std::vector<Scalar>(s.c)};
  for (std::size_t c = 0; c < s.c; ++c) {
    double sum = 0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const Scalar* x = input.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) sum += x[i];
    }
    const double mean = sum / count;
    double sq = 0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const Scalar* x = input.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) sq += (x[i] - mean) * (x[i] - mean);
    }
    const double var = sq / count;
    const Scalar m = static_cast<Scalar>(mean);
    const Scalar inv = static_cast<Scalar>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    r.mean[c] = m;
    r.variance[c] = static_cast<Scalar>(var);
    r.inv_std[c] = inv;
    for (std::size_t n = 0; n < s.n; ++n) {
      const Scalar* x = input.plane(n, c);
      Scalar* xh = r.normalized.plane(n, c);
      Scalar* y = r.output.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = (x[i] - m) * inv;
        y[i] = gamma[c] * xh[i] + beta[c];
      }
    }
  }
  return r;
}

template <typename Scalar>
Tensor<Scalar> batch_norm_eval(const Tensor<Scalar>& input, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                               const Tensor<Scalar>& running_mean, const Tensor<Scalar>& running_var, Scalar eps) {
  const Shape& s = input.shape();
  require(gamma.size() == s.c && running_mean.size() == s.c,
          "batch_norm: dimension C mismatch, input has " + std::to_string(s.c) + " channels");
  Tensor<Scalar> out(s);
  for (std::size_t c = 0; c < s.c; ++c) {
    const Scalar inv = Scalar(1) / std::sqrt(running_var[c] + eps);
    for (std::size_t n = 0; n < s.n; ++n) {
      const Scalar* x = input.plane(n, c);
      Scalar* y = out.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) y[i] = gamma[c] * ((x[i] - running_mean[c]) * inv) + beta[c];
    }
  }
  return out;
}

template <typename Scalar>
BatchNormGrads<Scalar> batch_norm_train_backward(const Tensor<Scalar>& output_grad, const BatchNormResult<Scalar>& saved,
                                                 const Tensor<Scalar>& gamma) {
  const Shape& s = saved.normalized.shape();
  require_shape(output_grad.shape(), s, "batch_norm_backward");
  const std::size_t plane = s.plane();
  const double count = static_cast<double>(s.n * plane);
  BatchNormGrads<Scalar> g{Tensor<Scalar>(s), Tensor<Scalar>(gamma.shape()), Tensor<Scalar>(gamma.shape())};
  for (std::size_t c = 0; c < s.c; ++c) {
    double sum_g = 0, sum_gx = 0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const Scalar* gy = output_grad.plane(n, c);
      const Scalar* xh = saved.normalized.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        sum_g += gy[i];
        sum_gx += gy[i] * xh[i];
      }
    }
    g.gamma[c] = static_cast<Scalar>(sum_gx);
    g.beta[c] = static_cast<Scalar>(sum_g);
    const Scalar k = gamma[c] * saved.inv_std[c];
    const Scalar mean_g = static_cast<Scalar>(sum_g / count);
    const Scalar mean_gx = static_cast<Scalar>(sum_gx / count);
    for (std::size_t n = 0; n < s.n; ++n) {
      const Scalar* gy = output_grad.plane(n, c);
      const Scalar* xh = saved.normalized.plane(n, c);
      Scalar* gx = g.input.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) gx[i] = k * (gy[i] - mean_g - xh[i] * mean_gx);
    }
  }
  return g;
}

template <typename Scalar>
BatchNormGrads<Scalar> batch_norm_eval_backward(const Tensor<Scalar>& output_grad, const Tensor<Scalar>& input,
                                                const Tensor<Scalar>& gamma, const Tensor<Scalar>& running_mean,
                                                const Tensor<Scalar>& running_var, Scalar eps) {
  const Shape& s = input.shape();
  require_shape(output_grad.shape(), s, "batch_norm_eval_backward");
  BatchNormGrads<Scalar> g{Tensor<Scalar>(s), Tensor<Scalar>(gamma.shape()), Tensor<Scalar>(gamma.shape())};
  for (std::size_t c = 0; c < s.c; ++c) {
    const Scalar inv = Scalar(1) / std::sqrt(running_var[c] + eps);
    Scalar dg = 0, db = 0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const Scalar* gy = output_grad.plane(n, c);
      const Scalar* x = input.plane(n, c);
      Scalar* gx = g.input.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        gx[i] = gy[i] * gamma[c] * inv;
        dg += gy[i] * (x[i] - running_mean[c]) * inv;
        db += gy[i];
      }
    }
    g.gamma[c] = dg;
    g.beta[c] = db;
  }
  return g;
}

template <typename Scalar>
void he_uniform(Tensor<Scalar>& t, std::size_t fan_in, Rng& rng) {
  require(fan_in > 0, "he_uniform: fan_in must be positive");
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<Scalar>(rng.uniform(-bound, bound));
}

#define MGIL_INSTANTIATE_OPS(S)                                                                                 \
  template Shape conv2d_output_shape(const Shape&, const ConvLayer<S>&);                                       \
  template Tensor<S> conv2d(const Tensor<S>&, const ConvLayer<S>&);                                            \
  template ConvGrads<S> conv2d_backward(const Tensor<S>&, const Tensor<S>&, const ConvLayer<S>&);              \
  template Tensor<S> relu(const Tensor<S>&);                                                                   \
  template Tensor<S> relu_backward(const Tensor<S>&, const Tensor<S>&);                                        \
  template Tensor<S> concat_channels(std::span<const Tensor<S>* const>);                                       \
  template Tensor<S> concat_channels(const std::vector<Tensor<S>>&);                                           \
  template Tensor<S> slice_channels(const Tensor<S>&, std::size_t, std::size_t);                               \
  template Tensor<S> global_avg_pool(const Tensor<S>&);                                                        \
  template Tensor<S> global_avg_pool_backward(const Tensor<S>&, const Shape&);                                 \
  template Tensor<S> fully_connected(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);                     \
  template LinearGrads<S> fully_connected_backward(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);       \
  template Tensor<S> conv1d_channels(const Tensor<S>&, const Tensor<S>&);                                      \
  template Conv1dGrads<S> conv1d_channels_backward(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);      \
  template Tensor<S> softmax_rows(const Tensor<S>&);                                                           \
  template Tensor<S> softmax_rows_backward(const Tensor<S>&, const Tensor<S>&);                                \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                                  \
  template Tensor<S> scale(const Tensor<S>&, S);                                                               \
  template Tensor<S> weighted_sum(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);                       \
  template WeightedSumGrads<S> weighted_sum_backward(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,      \
                                                     const Tensor<S>&);                                         \
  template MaxPoolResult<S> max_pool2d(const Tensor<S>&);                                                      \
  template Tensor<S> max_pool2d_backward(const Tensor<S>&, std::span<const std::size_t>, const Shape&);         \
  template BatchNormResult<S> batch_norm_train(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);       \
  template Tensor<S> batch_norm_eval(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,    \
                                     const Tensor<S>&, S);                                                      \
  template BatchNormGrads<S> batch_norm_train_backward(const Tensor<S>&, const BatchNormResult<S>&,            \
                                                       const Tensor<S>&);                                       \
  template BatchNormGrads<S> batch_norm_eval_backward(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,     \
                                                      const Tensor<S>&, const Tensor<S>&, S);                   \
  template void he_uniform(Tensor<S>&, std::size_t, Rng&);

MGIL_INSTANTIATE_OPS(float)
MGIL_INSTANTIATE_OPS(double)

#undef MGIL_INSTANTIATE_OPS

}  // namespace mgil
