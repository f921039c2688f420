#pragma once

// MGIL downsampling block and the comparison downsamplers. Every block maps
// (N, C, H, W) -> (N, C', H/2, W/2) for even H, W.
//
//   Mgil = fuse(Flie(x), Cii(x))
//   Flie = LIE stack after the space-to-channel transform (fine, lossless)
//   Cii  = LIE stack after parallel dilated stride-2 convs (coarse context)
//   fuse = Mgaf (softmax-weighted, content adaptive) or plain addition

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "mgil/ad.hpp"
#include "mgil/ops.hpp"
#include "mgil/random.hpp"
#include "mgil/sct.hpp"
#include "mgil/tape.hpp"

namespace mgil {

enum class Normalization { batch, none };
enum class Fusion { adaptive, additive };
/// Which tensor the coarse branch reads: the raw block input (stride-2 dilated
/// convs) or the space-to-channel output (stride-1 dilated convs).
enum class CiiInput { raw, sct };

struct MgilConfig {
  std::size_t in_channels = 1;
  std::size_t out_channels = 0;  // 0 means "same as in_channels"
  std::size_t lie_depth_flie = 3;
  std::size_t lie_depth_cii = 2;
  std::vector<std::size_t> dilation_rates{2, 3};
  Fusion fusion = Fusion::adaptive;
  bool cii_enabled = true;
  CiiInput cii_input = CiiInput::raw;
  Normalization normalization = Normalization::batch;
  double eca_gamma = 2.0;
  double eca_b = 1.0;

  std::size_t resolved_out() const { return out_channels == 0 ? in_channels : out_channels; }

  void validate() const {
    require(in_channels >= 1, "MgilConfig: in_channels must be positive");
    require(lie_depth_flie >= 1, "MgilConfig: lie_depth_flie must be >= 1 (one conv maps 4C to C')");
    if (cii_enabled) {
      require(!dilation_rates.empty(), "MgilConfig: dilation_rates must be non-empty when the CII branch is enabled");
      for (auto d : dilation_rates) {
        require(d >= 2, "MgilConfig: dilation rate " + std::to_string(d) + " must be >= 2");
      }
    }
  }

  bool operator==(const MgilConfig&) const = default;
};

/// ECA-style adaptive kernel size for a channel vector of length `channels`:
/// t = floor(|log2(channels) / gamma + b / gamma|), bumped to the next odd
/// value when even, floored at 1 and capped at the largest odd value <= channels.
inline std::size_t eca_kernel_size(std::size_t channels, double gamma = 2.0, double b = 1.0) {
  require(channels >= 1, "eca_kernel_size: channels must be positive");
  const double t = std::abs(std::log2(static_cast<double>(channels)) / gamma + b / gamma);
  auto k = static_cast<std::size_t>(t);
  if (k % 2 == 0) ++k;
  const std::size_t cap = channels % 2 == 1 ? channels : channels - 1;
  return std::max<std::size_t>(1, std::min(k, cap));
}

template <typename Scalar>
class BatchNorm2d {
public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels)
      : gamma(Shape{channels, 1, 1, 1}, Scalar(1)),
        beta(Shape{channels, 1, 1, 1}),
        running_mean(Shape{channels, 1, 1, 1}),
        running_var(Shape{channels, 1, 1, 1}, Scalar(1)) {}

  Var forward(GradTape<Scalar>& tape, Var x, Mode mode) {
    const Var g = tape.parameter(gamma);
    const Var b = tape.parameter(beta);
    if (mode == Mode::eval) {
      auto out = batch_norm_eval(tape.value(x), gamma, beta, running_mean, running_var, eps);
      return tape.record(std::move(out), {x, g, b}, [this, x, g, b](GradTape<Scalar>& t, const Tensor<Scalar>& grad) {
        auto grads = batch_norm_eval_backward(grad, t.value(x), gamma, running_mean, running_var, eps);
        t.accumulate(x, std::move(grads.input));
        t.accumulate(g, std::move(grads.gamma));
        t.accumulate(b, std::move(grads.beta));
      });
    }
    auto saved = std::make_shared<BatchNormResult<Scalar>>(batch_norm_train(tape.value(x), gamma, beta, eps));
    const Shape& s = tape.value(x).shape();
    const double count = static_cast<double>(s.n * s.plane());
    const double unbias = count > 1 ? count / (count - 1) : 1.0;
    for (std::size_t c = 0; c < s.c; ++c) {
      running_mean[c] = (Scalar(1) - momentum) * running_mean[c] + momentum * saved->mean[c];
      running_var[c] = (Scalar(1) - momentum) * running_var[c] +
                       momentum * static_cast<Scalar>(static_cast<double>(saved->variance[c]) * unbias);
    }
    Tensor<Scalar> out = saved->output;
    return tape.record(std::move(out), {x, g, b}, [this, saved, x, g, b](GradTape<Scalar>& t, const Tensor<Scalar>& grad) {
      auto grads = batch_norm_train_backward(grad, *saved, gamma);
      t.accumulate(x, std::move(grads.input));
      t.accumulate(g, std::move(grads.gamma));
      t.accumulate(b, std::move(grads.beta));
    });
  }

  void collect(ParamList<Scalar>& out, const std::string& prefix) {
    out.push_back({prefix + "gamma", &gamma, true});
    out.push_back({prefix + "beta", &beta, true});
    out.push_back({prefix + "running_mean", &running_mean, false});
    out.push_back({prefix + "running_var", &running_var, false});
  }

  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
  Tensor<Scalar> running_mean;
  Tensor<Scalar> running_var;
  Scalar momentum = Scalar(0.1);
  Scalar eps = Scalar(1e-5);
};

/// conv -> optional batch norm -> optional ReLU.
template <typename Scalar>
class ConvUnit {
public:
  ConvUnit() = default;
  ConvUnit(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t dilation,
           std::size_t padding, Normalization norm, Rng& rng, bool activation = true)
      : conv(ConvLayer<Scalar>::zeros(in, out, kernel, stride, dilation, padding)), activation(activation) {
    he_uniform(conv.weight, in * kernel * kernel, rng);
    if (norm == Normalization::batch) this->norm.emplace(out);
  }
  ConvUnit(ConvLayer<Scalar> layer, Normalization norm, bool activation = true)
      : conv(std::move(layer)), activation(activation) {
    if (norm == Normalization::batch) this->norm.emplace(conv.out_channels());
  }

  Var forward(GradTape<Scalar>& tape, Var x, Mode mode) {
    Var y = ad::conv2d(tape, x, conv);
    if (norm) y = norm->forward(tape, y, mode);
    if (activation) y = ad::relu(tape, y);
    return y;
  }

  void collect(ParamList<Scalar>& out, const std::string& prefix) {
    out.push_back({prefix + "conv.weight", &conv.weight, true});
    out.push_back({prefix + "conv.bias", &conv.bias, true});
    if (norm) norm->collect(out, prefix + "bn.");
  }

  ConvLayer<Scalar> conv;
  std::optional<BatchNorm2d<Scalar>> norm;
  bool activation = true;
};

/// Stack of non-strided convolutions (conv -> norm -> ReLU each). The first
/// layer maps the input channel count to the output channel count; spatial
/// size is preserved.
template <typename Scalar>
class LieBlock {
public:
  LieBlock() = default;

  /// depth layers of 3x3, pad 1: in -> out, then out -> out.
  LieBlock(std::size_t in, std::size_t out, std::size_t depth, Normalization norm, Rng& rng) {
    for (std::size_t i = 0; i < depth; ++i) units.emplace_back(i == 0 ? in : out, out, 3, 1, 1, 1, norm, rng);
  }

  /// Builds from caller-supplied layers after checking that each is
  /// non-strided, undilated, odd-kernel with same padding, and that the
  /// channel chain is consistent.
  static LieBlock from_layers(std::vector<ConvLayer<Scalar>> layers, Normalization norm) {
    LieBlock block;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      const std::string where = "lie_block: layer " + std::to_string(i);
      if (l.stride != 1) {
        throw ContractViolation(where + " has stride " + std::to_string(l.stride) +
                                "; LIE layers must be non-strided (stride 1)");
      }
      require(l.dilation == 1, where + " has dilation " + std::to_string(l.dilation) + ", expected 1");
      require(l.kernel() % 2 == 1, where + " kernel size must be odd");
      require(l.padding == (l.kernel() - 1) / 2, where + " padding must be (k - 1) / 2");
      if (i > 0) {
        require(layers[i - 1].out_channels() == l.in_channels(),
                where + " expects " + std::to_string(l.in_channels()) + " input channels but previous layer emits " +
                    std::to_string(layers[i - 1].out_channels()));
      }
    }
    for (auto& l : layers) block.units.emplace_back(std::move(l), norm);
    return block;
  }

  Var forward(GradTape<Scalar>& tape, Var x, Mode mode) {
    for (auto& u : units) x = u.forward(tape, x, mode);
    return x;
  }

  void collect(ParamList<Scalar>& out, const std::string& prefix) {
    for (std::size_t i = 0; i < units.size(); ++i) units[i].collect(out, prefix + std::to_string(i) + ".");
  }

  std::size_t depth() const { return units.size(); }

  std::vector<ConvUnit<Scalar>> units;
};

/// Fine-grained branch: space-to-channel transform, then a LIE block mapping
/// 4C -> C'. With depth 1 this is exactly SPD-Conv.
template <typename Scalar>
class Flie {
public:
  Flie() = default;
  Flie(std::size_t in, std::size_t out, std::size_t depth, Normalization norm, Rng& rng)
      : lie(4 * in, out, depth, norm, rng) {}

  Var forward(GradTape<Scalar>& tape, Var x, Mode mode) { return lie.forward(tape, ad::sct(tape, x), mode); }
  /// Continues from an SCT output that was already computed.
  Var forward_from_sct(GradTape<Scalar>& tape, Var sct_out, Mode mode) { return lie.forward(tape, sct_out, mode); }

  void collect(ParamList<Scalar>& out, const std::string& prefix) { lie.collect(out, prefix + "lie."); }

  LieBlock<Scalar> lie;
};

/// Multi-receptive extraction: one 3x3 conv per dilation rate (padding = rate),
/// outputs summed, then norm and ReLU.
template <typename Scalar>
class Mrie {
public:
  Mrie() = default;
  Mrie(std::size_t in, std::size_t out, const std::vector<std::size_t>& rates, std::size_t stride, Normalization norm,
       Rng& rng) {
    require(!rates.empty(), "mrie: dilation_rates must be non-empty");
    for (auto d : rates) {
      require(d >= 1, "mrie: dilation rate must be positive");
      branches.push_back(ConvLayer<Scalar>::zeros(in, out, 3, stride, d, d));
      he_uniform(branches.back().weight, in * 9, rng);
    }
    if (norm == Normalization::batch) this->norm.emplace(out);
  }

  Var forward(GradTape<Scalar>& tape, Var x, Mode mode) {
    require(!branches.empty(), "mrie: no dilation branches");
    Var sum = ad::conv2d(tape, x, branches.front());
    for (std::size_t i = 1; i < branches.size(); ++i) sum = ad::add(tape, sum, ad::conv2d(tape, x, branches[i]));
    if (norm) sum = norm->forward(tape, sum, mode);
    return ad::relu(tape, sum);
  }

  void collect(ParamList<Scalar>& out, const std::string& prefix) {
    for (std::size_t i = 0; i < branches.size(); ++i) {
      const std::string p = prefix + "branch" + std::to_string(i) + ".";
      out.push_back({p + "weight", &branches[i].weight, true});
      out.push_back({p + "bias", &branches[i].bias, true});
    }
    if (norm) norm->collect(out, prefix + "bn.");
  }

  std::vector<ConvLayer<Scalar>> branches;
  std::optional<BatchNorm2d<Scalar>> norm;
};

/// Coarse-grained branch: MRIE, then an optional LIE block (depth 0 skips it).
template <typename Scalar>
class Cii {
public:
  Cii() = default;
  Cii(std::size_t in, std::size_t out, const std::vector<std::size_t>& rates, std::size_t stride, std::size_t lie_depth,
      Normalization norm, Rng& rng)
      : mrie(in, out, rates, stride, norm, rng) {
    if (lie_depth > 0) lie.emplace(out, out, lie_depth, norm, rng);
  }

  Var forward(GradTape<Scalar>& tape, Var x, Mode mode) {
    Var y = mrie.forward(tape, x, mode);
    if (lie) y = lie->forward(tape, y, mode);
    return y;
  }

  void collect(ParamList<Scalar>& out, const std::string& prefix) {
    mrie.collect(out, prefix + "mrie.");
    if (lie) lie->collect(out, prefix + "lie.");
  }

  Mrie<Scalar> mrie;
  std::optional<LieBlock<Scalar>> lie;
};

/// Adaptive two-way fusion. Pools the concatenated branch outputs to a 2C'
/// vector, runs a shared-kernel channel conv, ReLU, FC to 2 logits and a
/// softmax per sample, then blends the branches with those weights.
template <typename Scalar>
class Mgaf {
public:
  Mgaf() = default;
  Mgaf(std::size_t channels, Rng& rng, double gamma = 2.0, double b = 1.0)
      : kernel(Shape{1, 1, 1, eca_kernel_size(2 * channels, gamma, b)}),
        fc_weight(Shape{2, 2 * channels, 1, 1}),
        fc_bias(Shape{2, 1, 1, 1}) {
    he_uniform(kernel, kernel.size(), rng);
    he_uniform(fc_weight, 2 * channels, rng);
  }

  /// Fusion weights lambda, shape (N, 2, 1, 1); each row sums to 1.
  Var weights(GradTape<Scalar>& tape, Var f0, Var f1) {
    const Shape& a = tape.value(f0).shape();
    const Shape& b = tape.value(f1).shape();
    if (a != b) throw ContractViolation("mgaf: branch shapes differ, f0 " + a.str() + " vs f1 " + b.str());
    Var pooled = ad::global_avg_pool(tape, ad::concat_channels(tape, {f0, f1}));
    Var mixed = ad::conv1d_channels(tape, pooled, kernel);
    Var logits = ad::fully_connected(tape, ad::relu(tape, mixed), fc_weight, fc_bias);
    return ad::softmax_rows(tape, logits);
  }

  Var forward(GradTape<Scalar>& tape, Var f0, Var f1, Var* lambda_out = nullptr) {
    const Var lambda = weights(tape, f0, f1);
    if (lambda_out != nullptr) *lambda_out = lambda;
    return ad::weighted_sum(tape, lambda, f0, f1);
  }

  void collect(ParamList<Scalar>& out, const std::string& prefix) {
    out.push_back({prefix + "conv1d.kernel", &kernel, true});
    out.push_back({prefix + "fc.weight", &fc_weight, true});
    out.push_back({prefix + "fc.bias", &fc_bias, true});
  }

  Tensor<Scalar> kernel;
  Tensor<Scalar> fc_weight;
  Tensor<Scalar> fc_bias;
};

/// Intermediate values of one Mgil forward pass.
struct MgilTrace {
  Var fine{};
  Var coarse{};
  Var lambda{};
  bool has_coarse = false;
  bool has_lambda = false;
};

template <typename Scalar>
class Mgil {
public:
  Mgil() = default;
  Mgil(const MgilConfig& config, Rng& rng) : config_(config) {
    config.validate();
    const std::size_t c = config.in_channels;
    const std::size_t out = config.resolved_out();
    flie = Flie<Scalar>(c, out, config.lie_depth_flie, config.normalization, rng);
    if (config.cii_enabled) {
      const bool raw = config.cii_input == CiiInput::raw;
      cii.emplace(raw ? c : 4 * c, out, config.dilation_rates, raw ? 2 : 1, config.lie_depth_cii, config.normalization,
                  rng);
      if (config.fusion == Fusion::adaptive) mgaf.emplace(out, rng, config.eca_gamma, config.eca_b);
    }
  }

  Var forward(GradTape<Scalar>& tape, Var x, Mode mode, MgilTrace* trace = nullptr) {
    const Shape& s = tape.value(x).shape();
    if (s.c != config_.in_channels) {
      throw ContractViolation("mgil: dimension C mismatch, input has " + std::to_string(s.c) +
                              " channels, block expects " + std::to_string(config_.in_channels));
    }
    const Var sct_out = ad::sct(tape, x);
    const Var fine = flie.forward_from_sct(tape, sct_out, mode);
    if (trace != nullptr) trace->fine = fine;
    if (!cii) return fine;
    const Var coarse = cii->forward(tape, config_.cii_input == CiiInput::raw ? x : sct_out, mode);
    if (trace != nullptr) {
      trace->coarse = coarse;
      trace->has_coarse = true;
    }
    if (!mgaf) return ad::add(tape, fine, coarse);
    Var lambda{};
    const Var fused = mgaf->forward(tape, fine, coarse, &lambda);
    if (trace != nullptr) {
      trace->lambda = lambda;
      trace->has_lambda = true;
    }
    return fused;
  }

  void collect(ParamList<Scalar>& out, const std::string& prefix) {
    flie.collect(out, prefix + "flie.");
    if (cii) cii->collect(out, prefix + "cii.");
    if (mgaf) mgaf->collect(out, prefix + "mgaf.");
  }

  const MgilConfig& config() const { return config_; }

  Flie<Scalar> flie;
  std::optional<Cii<Scalar>> cii;
  std::optional<Mgaf<Scalar>> mgaf;

private:
  MgilConfig config_;
};

/// Space-to-depth followed by one non-strided 3x3 conv unit (4C -> C').
template <typename Scalar>
class SpdConv {
public:
  SpdConv() = default;
  SpdConv(std::size_t in, std::size_t out, Normalization norm, Rng& rng) : unit(4 * in, out, 3, 1, 1, 1, norm, rng) {}

  Var forward(GradTape<Scalar>& tape, Var x, Mode mode) { return unit.forward(tape, ad::sct(tape, x), mode); }
  void collect(ParamList<Scalar>& out, const std::string& prefix) { unit.collect(out, prefix); }

  ConvUnit<Scalar> unit;
};

/// 3x3 stride-2 conv unit, pad 1.
template <typename Scalar>
class StridedConvDown {
public:
  StridedConvDown() = default;
  StridedConvDown(std::size_t in, std::size_t out, Normalization norm, Rng& rng) : unit(in, out, 3, 2, 1, 1, norm, rng) {}

  Var forward(GradTape<Scalar>& tape, Var x, Mode mode) {
    const Shape& s = tape.value(x).shape();
    if (s.h % 2 != 0 || s.w % 2 != 0) throw ContractViolation("strided_downsample: H and W must be even, got " + s.str());
    return unit.forward(tape, x, mode);
  }
  void collect(ParamList<Scalar>& out, const std::string& prefix) { unit.collect(out, prefix); }

  ConvUnit<Scalar> unit;
};

/// 2x2 max pool; a 1x1 conv unit projects channels when C' != C.
template <typename Scalar>
class PoolDown {
public:
  PoolDown() = default;
  PoolDown(std::size_t in, std::size_t out, Normalization norm, Rng& rng) {
    if (in != out) projection.emplace(in, out, 1, 1, 1, 0, norm, rng);
  }

  Var forward(GradTape<Scalar>& tape, Var x, Mode mode) {
    Var y = ad::max_pool2d(tape, x);
    if (projection) y = projection->forward(tape, y, mode);
    return y;
  }
  void collect(ParamList<Scalar>& out, const std::string& prefix) {
    if (projection) projection->collect(out, prefix + "proj.");
  }

  std::optional<ConvUnit<Scalar>> projection;
};

enum class DownsamplerKind { strided_conv, max_pool, spd_conv, mgil };

inline const char* to_string(DownsamplerKind k) {
  switch (k) {
    case DownsamplerKind::strided_conv: return "strided_conv";
    case DownsamplerKind::max_pool: return "max_pool";
    case DownsamplerKind::spd_conv: return "spd_conv";
    case DownsamplerKind::mgil: return "mgil";
  }
  return "?";
}

/// Any of the four interchangeable downsamplers.
template <typename Scalar>
class Downsampler {
public:
  using Variant = std::variant<StridedConvDown<Scalar>, PoolDown<Scalar>, SpdConv<Scalar>, Mgil<Scalar>>;

  Downsampler() = default;
  explicit Downsampler(Variant block) : block_(std::move(block)) {}

  /// `mgil` supplies the block hyperparameters; its channel fields are
  /// overwritten with in/out.
  static Downsampler make(DownsamplerKind kind, std::size_t in, std::size_t out, MgilConfig mgil, Normalization norm,
                          Rng& rng) {
    switch (kind) {
      case DownsamplerKind::strided_conv: return Downsampler(StridedConvDown<Scalar>(in, out, norm, rng));
      case DownsamplerKind::max_pool: return Downsampler(PoolDown<Scalar>(in, out, norm, rng));
      case DownsamplerKind::spd_conv: return Downsampler(SpdConv<Scalar>(in, out, norm, rng));
      case DownsamplerKind::mgil:
        mgil.in_channels = in;
        mgil.out_channels = out;
        mgil.normalization = norm;
        return Downsampler(Mgil<Scalar>(mgil, rng));
    }
    throw ContractViolation("unknown downsampler kind");
  }

  Var forward(GradTape<Scalar>& tape, Var x, Mode mode) {
    const Shape& s = tape.value(x).shape();
    if (s.h % 2 != 0 || s.w % 2 != 0) {
      throw ContractViolation("downsampler: H and W must be even, got " + s.str());
    }
    return std::visit([&](auto& b) { return b.forward(tape, x, mode); }, block_);
  }

  void collect(ParamList<Scalar>& out, const std::string& prefix) {
    std::visit([&](auto& b) { b.collect(out, prefix); }, block_);
  }

  DownsamplerKind kind() const { return static_cast<DownsamplerKind>(block_.index()); }
  Variant& block() { return block_; }

private:
  Variant block_;
};

/// Runs `block.forward` on a fresh tape and returns the output value.
template <typename Scalar, typename Block>
Tensor<Scalar> run_forward(Block& block, const Tensor<Scalar>& input, Mode mode) {
  GradTape<Scalar> tape;
  const Var y = block.forward(tape, tape.constant(input), mode);
  return tape.value(y);
}

}  // namespace mgil
