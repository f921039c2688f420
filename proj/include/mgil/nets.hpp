#pragma once

// Small task networks with a pluggable downsampler between stages.
//
//   stem (3x3 conv unit, in -> base_width)
//   stage 0 (blocks_per_stage conv units) -> down 0 -> stage 1 -> ... -> stage S-1
//   head: classifier (GAP -> FC) or heatmap (3x3 conv unit layers -> 1x1 conv to K)
//
// Every component draws its initial weights from its own stream,
// derive_seed(seed, component name), so swapping the downsampler kind leaves
// all other parameters bit-identical.

#include <cstdint>
#include <string>
#include <vector>

#include "mgil/blocks.hpp"

namespace mgil {

enum class HeadKind { classifier, heatmap };

struct NetSpec {
  std::size_t in_channels = 3;
  std::size_t base_width = 16;
  std::size_t num_stages = 3;
  std::size_t blocks_per_stage = 2;
  /// Double the width at each downsampler.
  bool widen = true;
  DownsamplerKind downsampler = DownsamplerKind::strided_conv;
  /// Hyperparameters for MGIL downsamplers; channel fields are set per stage.
  MgilConfig mgil{};
  Normalization normalization = Normalization::batch;
  HeadKind head = HeadKind::classifier;
  std::size_t num_classes = 10;
  std::size_t num_keypoints = 1;
  /// Non-strided conv layers in the heatmap head, the last one mapping to K.
  std::size_t decoder_layers = 2;

  std::size_t downsamplers() const { return num_stages - 1; }
  std::size_t output_stride() const { return std::size_t{1} << downsamplers(); }
  std::size_t stage_width(std::size_t stage) const { return widen ? base_width << stage : base_width; }
  std::size_t head_channels() const { return head == HeadKind::classifier ? num_classes : num_keypoints; }

  void validate() const {
    require(in_channels >= 1 && base_width >= 1, "NetSpec: channel counts must be positive");
    require(num_stages >= 1 && num_stages <= 6, "NetSpec: num_stages must be in [1, 6]");
    if (head == HeadKind::classifier) require(num_classes >= 2, "NetSpec: num_classes must be >= 2");
    if (head == HeadKind::heatmap) {
      require(num_keypoints >= 1, "NetSpec: num_keypoints must be positive");
      require(decoder_layers >= 1, "NetSpec: decoder_layers must be >= 1");
    }
    MgilConfig m = mgil;
    m.in_channels = base_width;
    m.out_channels = base_width;
    m.validate();
  }

  /// Three stages of two 3x3 conv units, width 16, two downsamplers.
  static NetSpec toy_classifier(DownsamplerKind kind = DownsamplerKind::strided_conv) {
    NetSpec s;
    s.downsampler = kind;
    return s;
  }

  /// Encoder with two downsamplers (output stride 4) and a two-layer head.
  static NetSpec toy_heatmap(DownsamplerKind kind = DownsamplerKind::mgil) {
    NetSpec s;
    s.base_width = 8;
    s.blocks_per_stage = 1;
    s.downsampler = kind;
    s.head = HeadKind::heatmap;
    s.num_keypoints = 1;
    s.decoder_layers = 2;
    return s;
  }

  bool operator==(const NetSpec&) const = default;
};

template <typename Scalar>
struct Prediction {
  HeadKind head = HeadKind::classifier;
  /// Classifier: (N, num_classes, 1, 1) logits. Heatmap: (N, K, H/stride, W/stride).
  Tensor<Scalar> output;
};

template <typename Scalar>
class Net {
public:
  Net() = default;
  Net(const NetSpec& spec, std::uint64_t seed) : spec_(spec) {
    spec.validate();
    {
      Rng rng(derive_seed(seed, "stem"));
      stem_ = ConvUnit<Scalar>(spec.in_channels, spec.base_width, 3, 1, 1, 1, spec.normalization, rng);
    }
    for (std::size_t s = 0; s < spec.num_stages; ++s) {
      const std::size_t width = spec.stage_width(s);
      std::vector<ConvUnit<Scalar>> stage;
      for (std::size_t b = 0; b < spec.blocks_per_stage; ++b) {
        Rng rng(derive_seed(seed, "stage" + std::to_string(s) + ".block" + std::to_string(b)));
        stage.emplace_back(width, width, 3, 1, 1, 1, spec.normalization, rng);
      }
      stages_.push_back(std::move(stage));
      if (s + 1 < spec.num_stages) {
        Rng rng(derive_seed(seed, "down" + std::to_string(s)));
        downs_.push_back(
            Downsampler<Scalar>::make(spec.downsampler, width, spec.stage_width(s + 1), spec.mgil, spec.normalization, rng));
      }
    }
    const std::size_t top = spec.stage_width(spec.num_stages - 1);
    Rng rng(derive_seed(seed, "head"));
    if (spec.head == HeadKind::classifier) {
      fc_weight_ = Tensor<Scalar>(Shape{spec.num_classes, top, 1, 1});
      fc_bias_ = Tensor<Scalar>(Shape{spec.num_classes, 1, 1, 1});
      he_uniform(fc_weight_, top, rng);
    } else {
      for (std::size_t i = 0; i + 1 < spec.decoder_layers; ++i) {
        decoder_.emplace_back(top, top, 3, 1, 1, 1, spec.normalization, rng);
      }
      heatmap_ = ConvLayer<Scalar>::zeros(top, spec.num_keypoints, 1, 1, 1, 0);
      he_uniform(heatmap_.weight, top, rng);
    }
  }

  /// Checks channel count and that H, W are divisible by the output stride.
  void check_input(const Shape& s) const {
    if (s.c != spec_.in_channels) {
      throw ContractViolation("net: dimension C mismatch, input has " + std::to_string(s.c) + " channels, expected " +
                              std::to_string(spec_.in_channels));
    }
    const std::size_t stride = spec_.output_stride();
    if (s.h % stride != 0 || s.w % stride != 0 || s.h == 0 || s.w == 0) {
      throw ContractViolation("net: input " + s.str() + " must have H and W divisible by " + std::to_string(stride));
    }
  }

  /// `stage_outputs`, when given, receives the output of every stage.
  Var forward(GradTape<Scalar>& tape, Var x, Mode mode, std::vector<Var>* stage_outputs = nullptr) {
    check_input(tape.value(x).shape());
    Var y = stem_.forward(tape, x, mode);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      for (auto& unit : stages_[s]) y = unit.forward(tape, y, mode);
      if (stage_outputs != nullptr) stage_outputs->push_back(y);
      if (s < downs_.size()) y = downs_[s].forward(tape, y, mode);
    }
    if (spec_.head == HeadKind::classifier) {
      return ad::fully_connected(tape, ad::global_avg_pool(tape, y), fc_weight_, fc_bias_);
    }
    for (auto& unit : decoder_) y = unit.forward(tape, y, mode);
    return ad::conv2d(tape, y, heatmap_);
  }

  Prediction<Scalar> predict(const Tensor<Scalar>& input, Mode mode = Mode::eval) {
    GradTape<Scalar> tape;
    const Var y = forward(tape, tape.constant(input), mode);
    return {spec_.head, tape.value(y)};
  }

  /// Every tensor the net owns, trainable or not, in a fixed order.
  ParamList<Scalar> parameters() {
    ParamList<Scalar> out;
    stem_.collect(out, "stem.");
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      for (std::size_t b = 0; b < stages_[s].size(); ++b) {
        stages_[s][b].collect(out, "stage" + std::to_string(s) + ".block" + std::to_string(b) + ".");
      }
      if (s < downs_.size()) downs_[s].collect(out, "down" + std::to_string(s) + ".");
    }
    if (spec_.head == HeadKind::classifier) {
      out.push_back({"head.fc.weight", &fc_weight_, true});
      out.push_back({"head.fc.bias", &fc_bias_, true});
    } else {
      for (std::size_t i = 0; i < decoder_.size(); ++i) decoder_[i].collect(out, "head.decoder" + std::to_string(i) + ".");
      out.push_back({"head.heatmap.weight", &heatmap_.weight, true});
      out.push_back({"head.heatmap.bias", &heatmap_.bias, true});
    }
    return out;
  }

  const NetSpec& spec() const { return spec_; }
  std::vector<Downsampler<Scalar>>& downsamplers() { return downs_; }

private:
  NetSpec spec_;
  ConvUnit<Scalar> stem_;
  std::vector<std::vector<ConvUnit<Scalar>>> stages_;
  std::vector<Downsampler<Scalar>> downs_;
  Tensor<Scalar> fc_weight_;
  Tensor<Scalar> fc_bias_;
  std::vector<ConvUnit<Scalar>> decoder_;
  ConvLayer<Scalar> heatmap_;
};

struct Keypoint {
  std::size_t x = 0;
  std::size_t y = 0;
  bool operator==(const Keypoint&) const = default;
};

/// Argmax location of every keypoint channel of sample `n`, in heatmap pixel
/// coordinates. Ties go to the lowest row-major index.
template <typename Scalar>
std::vector<Keypoint> decode_keypoints(const Tensor<Scalar>& heatmaps, std::size_t n = 0) {
  const Shape& s = heatmaps.shape();
  require(n < s.n, "decode_keypoints: sample " + std::to_string(n) + " out of range for " + s.str());
  require(s.plane() > 0, "decode_keypoints: empty heatmap");
  std::vector<Keypoint> out;
  for (std::size_t k = 0; k < s.c; ++k) {
    const Scalar* p = heatmaps.plane(n, k);
    std::size_t best = 0;
    for (std::size_t i = 1; i < s.plane(); ++i) {
      if (p[i] > p[best]) best = i;
    }
    out.push_back({best % s.w, best / s.w});
  }
  return out;
}

}  // namespace mgil
