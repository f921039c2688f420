#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "mgil/blocks.hpp"
#include "mgil/sct.hpp"
#include "test_util.hpp"

namespace mgil {
namespace {

using testing::random_tensor;

Shape random_even_shape(Rng& rng, std::size_t max_c = 4, std::size_t max_half = 4) {
  return Shape{1 + rng.below(2), 1 + rng.below(max_c), 2 * (1 + rng.below(max_half)), 2 * (1 + rng.below(max_half))};
}

template <typename Scalar>
Tensor<Scalar> relu_ref(Tensor<Scalar> t) {
  for (auto& v : t.data()) v = v > Scalar(0) ? v : Scalar(0);
  return t;
}

// ---------------------------------------------------------------- SCT

TEST(Sct, TwoByTwoSamplesInOffsetOrder) {
  const Tensor<float> x(Shape{1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  const auto y = sct_forward(x);
  EXPECT_EQ(y.shape(), (Shape{1, 4, 1, 1}));
  EXPECT_EQ(std::vector<float>(y.data().begin(), y.data().end()), (std::vector<float>{1, 3, 2, 4}));
}

TEST(Sct, ChannelGroupsAreOffsetMajor) {
  // Two input channels: output block b holds offset b of every channel.
  const Tensor<float> x(Shape{1, 2, 2, 2}, std::vector<float>{1, 2, 3, 4, 10, 20, 30, 40});
  const auto y = sct_forward(x);
  EXPECT_EQ(std::vector<float>(y.data().begin(), y.data().end()), (std::vector<float>{1, 10, 3, 30, 2, 20, 4, 40}));
}

TEST(Sct, InverseOfExample) {
  const Tensor<float> y(Shape{1, 4, 1, 1}, std::vector<float>{1, 3, 2, 4});
  const auto x = sct_inverse(y);
  EXPECT_EQ(x.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(std::vector<float>(x.data().begin(), x.data().end()), (std::vector<float>{1, 2, 3, 4}));
}

TEST(Sct, ConstantStaysConstant) {
  const Tensor<float> x(Shape{2, 3, 6, 4}, 2.5f);
  const auto y = sct_forward(x);
  EXPECT_EQ(y.shape(), (Shape{2, 12, 3, 2}));
  for (float v : y.data()) EXPECT_EQ(v, 2.5f);
}

TEST(Sct, OddSizeAskedToPad) {
  const Tensor<float> x(Shape{1, 1, 3, 4});
  try {
    sct_forward(x);
    FAIL() << "odd height accepted";
  } catch (const ContractViolation& e) {
    EXPECT_NE(std::string(e.what()).find("pad"), std::string::npos) << e.what();
  }
  EXPECT_THROW(sct_forward(Tensor<float>(Shape{1, 1, 4, 5})), ContractViolation);
}

TEST(Sct, InverseNeedsChannelsDivisibleByFour) {
  EXPECT_THROW(sct_inverse(Tensor<float>(Shape{1, 6, 2, 2})), ContractViolation);
}

TEST(SctProperty, RoundTripIsBitwiseAndPreservesMultiset) {
  Rng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const Shape s{1 + rng.below(2), 1 + rng.below(8), 2 * (1 + rng.below(16)), 2 * (1 + rng.below(16))};
    const auto x = random_tensor<float>(s, rng, -100, 100);
    const auto y = sct_forward(x);
    ASSERT_EQ(y.shape(), (Shape{s.n, 4 * s.c, s.h / 2, s.w / 2}));
    ASSERT_TRUE(bitwise_equal(sct_inverse(y), x)) << s.str();
    std::vector<float> a(x.data().begin(), x.data().end());
    std::vector<float> b(y.data().begin(), y.data().end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    ASSERT_EQ(a, b) << s.str();
  }
}

TEST(SctProperty, DoubleRoundTripIsIdempotent) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = random_tensor<double>(random_even_shape(rng, 4, 8), rng);
    const auto once = sct_inverse(sct_forward(x));
    EXPECT_TRUE(bitwise_equal(sct_inverse(sct_forward(once)), x));
  }
}

TEST(Sct, GradientIsInversePermutation) {
  Rng rng(9);
  const auto x = random_tensor<double>(Shape{1, 2, 4, 4}, rng);
  const auto g = random_tensor<double>(Shape{1, 8, 2, 2}, rng);
  GradTape<double> tape;
  const Var xv = tape.input(x);
  tape.backward(ad::sct(tape, xv), g);
  EXPECT_TRUE(bitwise_equal(tape.grad(xv), sct_inverse(g)));
}

// ---------------------------------------------------------------- LIE

TEST(Lie, RejectsStridedLayer) {
  std::vector<ConvLayer<float>> layers{ConvLayer<float>::zeros(2, 2, 3, 2, 1, 1)};
  try {
    LieBlock<float>::from_layers(layers, Normalization::batch);
    FAIL() << "strided layer accepted";
  } catch (const ContractViolation& e) {
    EXPECT_NE(std::string(e.what()).find("stride"), std::string::npos) << e.what();
  }
}

TEST(Lie, RejectsBrokenChannelChain) {
  std::vector<ConvLayer<float>> layers{ConvLayer<float>::zeros(2, 3, 3, 1, 1, 1), ConvLayer<float>::zeros(4, 3, 3, 1, 1, 1)};
  EXPECT_THROW(LieBlock<float>::from_layers(layers, Normalization::none), ContractViolation);
  std::vector<ConvLayer<float>> dilated{ConvLayer<float>::zeros(2, 2, 3, 1, 2, 2)};
  EXPECT_THROW(LieBlock<float>::from_layers(dilated, Normalization::none), ContractViolation);
}

TEST(Lie, IdentityPointwiseLayerIsRelu) {
  auto layer = ConvLayer<float>::zeros(3, 3, 1, 1, 1, 0);
  for (std::size_t c = 0; c < 3; ++c) layer.weight(c, c, 0, 0) = 1.0f;
  auto lie = LieBlock<float>::from_layers({layer}, Normalization::none);
  Rng rng(1);
  const auto x = random_tensor<float>(Shape{2, 3, 4, 5}, rng);
  EXPECT_TRUE(bitwise_equal(run_forward(lie, x, Mode::train), relu_ref(x)));
}

TEST(Lie, DefaultDepthIsThreeAndFirstLayerMapsChannels) {
  Rng rng(2);
  MgilConfig cfg;
  EXPECT_EQ(cfg.lie_depth_flie, 3u);
  LieBlock<float> lie(8, 3, cfg.lie_depth_flie, Normalization::batch, rng);
  ASSERT_EQ(lie.depth(), 3u);
  EXPECT_EQ(lie.units[0].conv.in_channels(), 8u);
  EXPECT_EQ(lie.units[0].conv.out_channels(), 3u);
  EXPECT_EQ(lie.units[2].conv.in_channels(), 3u);
}

TEST(LieProperty, SpatialSizePreserved) {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const Shape s{1 + rng.below(2), 1 + rng.below(4), 1 + rng.below(9), 1 + rng.below(9)};
    const std::size_t out = 1 + rng.below(4);
    LieBlock<float> lie(s.c, out, 1 + rng.below(3), Normalization::batch, rng);
    const auto y = run_forward(lie, random_tensor<float>(s, rng), Mode::train);
    EXPECT_EQ(y.shape(), (Shape{s.n, out, s.h, s.w}));
  }
}

// ---------------------------------------------------------------- FLIE / SPD

TEST(Flie, DepthOneMatchesSpdConvBitwise) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const Shape s = random_even_shape(rng);
    const std::size_t out = 1 + rng.below(4);
    Flie<float> flie(s.c, out, 1, Normalization::batch, rng);
    SpdConv<float> spd(s.c, out, Normalization::batch, rng);
    spd.unit.conv = flie.lie.units[0].conv;
    const auto x = random_tensor<float>(s, rng);
    ASSERT_TRUE(bitwise_equal(run_forward(flie, x, Mode::train), run_forward(spd, x, Mode::train)));
    ASSERT_TRUE(bitwise_equal(run_forward(flie, x, Mode::eval), run_forward(spd, x, Mode::eval)));
  }
}

TEST(Flie, ShapeContract) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Shape s = random_even_shape(rng);
    Flie<float> flie(s.c, 3, 3, Normalization::batch, rng);
    EXPECT_EQ(run_forward(flie, random_tensor<float>(s, rng), Mode::train).shape(), (Shape{s.n, 3, s.h / 2, s.w / 2}));
  }
}

TEST(Flie, EveryInputPixelReachesTheOutput) {
  Rng rng(6);
  const Shape s{1, 2, 6, 6};
  Flie<double> flie(s.c, 4, 1, Normalization::none, rng);
  for (auto& v : flie.lie.units[0].conv.bias.data()) v = 10.0;  // keep every ReLU active
  auto x = random_tensor<double>(s, rng);
  const auto base = run_forward(flie, x, Mode::eval);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + 0.5;
    EXPECT_GT(max_abs_diff(run_forward(flie, x, Mode::eval), base), 0.0) << "input element " << i;
    x[i] = saved;
  }
}

// ---------------------------------------------------------------- MRIE / CII

TEST(Mrie, RateOneIsStandardStridedConvBitwise) {
  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    const Shape s = random_even_shape(rng);
    const std::size_t out = 1 + rng.below(4);
    Mrie<float> mrie(s.c, out, {1}, 2, Normalization::batch, rng);
    ConvUnit<float> standard(mrie.branches[0], Normalization::batch);
    const auto x = random_tensor<float>(s, rng);
    ASSERT_TRUE(bitwise_equal(run_forward(mrie, x, Mode::train), run_forward(standard, x, Mode::train)));
    const auto& b = mrie.branches[0];
    ASSERT_TRUE(bitwise_equal(conv2d(x, b), testing::naive_conv2d(x, b.weight, b.bias, 2, 1, 1)));
  }
}

TEST(Mrie, RatesTwoAndThreeHaveExtentsFiveAndSeven) {
  Rng rng(11);
  Mrie<float> mrie(2, 2, {2, 3}, 2, Normalization::batch, rng);
  ASSERT_EQ(mrie.branches.size(), 2u);
  EXPECT_EQ(mrie.branches[0].extent(), 5u);
  EXPECT_EQ(mrie.branches[1].extent(), 7u);
  EXPECT_EQ(mrie.branches[1].padding, 3u);
}

TEST(Mrie, EqualsSumOfIndependentBranches) {
  Rng rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    const Shape s = random_even_shape(rng);
    Mrie<float> mrie(s.c, 3, {2, 3}, 2, Normalization::none, rng);
    for (auto& b : mrie.branches) b.bias = random_tensor<float>(b.bias.shape(), rng);
    const auto x = random_tensor<float>(s, rng);
    auto expected = testing::naive_conv2d(x, mrie.branches[0].weight, mrie.branches[0].bias, 2, 2, 2);
    const auto second = testing::naive_conv2d(x, mrie.branches[1].weight, mrie.branches[1].bias, 2, 3, 3);
    for (std::size_t i = 0; i < expected.size(); ++i) expected[i] += second[i];
    ASSERT_TRUE(bitwise_equal(run_forward(mrie, x, Mode::train), relu_ref(expected)));
  }
}

TEST(Mrie, EmptyRatesRejected) {
  Rng rng(13);
  EXPECT_THROW(Mrie<float>(2, 2, {}, 2, Normalization::batch, rng), ContractViolation);
}

TEST(Cii, DepthZeroReturnsMrieOutput) {
  Rng rng(14);
  Cii<float> cii(2, 3, {2, 3}, 2, 0, Normalization::batch, rng);
  EXPECT_FALSE(cii.lie.has_value());
  const auto x = random_tensor<float>(Shape{2, 2, 8, 6}, rng);
  EXPECT_TRUE(bitwise_equal(run_forward(cii, x, Mode::train), run_forward(cii.mrie, x, Mode::train)));
}

TEST(Cii, DepthGridIsConstructible) {
  // (fine depth, coarse depth); coarse depth 0 means the coarse branch has no LIE.
  const std::vector<std::pair<std::size_t, std::size_t>> grid{{1, 0}, {1, 1}, {2, 0}, {2, 1}, {2, 2}};
  Rng rng(15);
  for (auto [fine, coarse] : grid) {
    MgilConfig cfg;
    cfg.in_channels = 3;
    cfg.lie_depth_flie = fine;
    cfg.lie_depth_cii = coarse;
    Mgil<float> block(cfg, rng);
    EXPECT_EQ(block.flie.lie.depth(), fine);
    ASSERT_TRUE(block.cii.has_value());
    EXPECT_EQ(block.cii->lie ? block.cii->lie->depth() : 0u, coarse);
    EXPECT_EQ(run_forward(block, random_tensor<float>(Shape{2, 3, 8, 8}, rng), Mode::train).shape(),
              (Shape{2, 3, 4, 4}));
  }
}

TEST(CiiProperty, ShapeContract) {
  Rng rng(16);
  for (int trial = 0; trial < 30; ++trial) {
    const Shape s = random_even_shape(rng);
    const std::size_t out = 1 + rng.below(4);
    Cii<float> cii(s.c, out, {2, 3}, 2, rng.below(3), Normalization::batch, rng);
    EXPECT_EQ(run_forward(cii, random_tensor<float>(s, rng), Mode::train).shape(), (Shape{s.n, out, s.h / 2, s.w / 2}));
  }
}

// ---------------------------------------------------------------- MGAF

TEST(Mgaf, KernelSizeTable) {
  // |log2(L) / 2 + 1 / 2| rounded to an odd integer, capped by L.
  EXPECT_EQ(eca_kernel_size(2), 1u);
  EXPECT_EQ(eca_kernel_size(4), 1u);
  EXPECT_EQ(eca_kernel_size(8), 3u);
  EXPECT_EQ(eca_kernel_size(16), 3u);
  EXPECT_EQ(eca_kernel_size(32), 3u);
  EXPECT_EQ(eca_kernel_size(64), 3u);
  EXPECT_EQ(eca_kernel_size(128), 5u);
  EXPECT_EQ(eca_kernel_size(256), 5u);
  EXPECT_EQ(eca_kernel_size(1024), 5u);
  EXPECT_EQ(eca_kernel_size(4096), 7u);
}

TEST(Mgaf, EqualBranchesReturnThatBranch) {
  Rng rng(20);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t c = 1 + rng.below(8);
    Mgaf<float> mgaf(c, rng);
    const auto f = random_tensor<float>(Shape{1 + rng.below(3), c, 1 + rng.below(4), 1 + rng.below(4)}, rng, -5, 5);
    GradTape<float> tape;
    const Var v = tape.constant(f);
    EXPECT_LE(max_abs_diff(tape.value(mgaf.forward(tape, v, v)), f), 1e-6);
  }
}

TEST(Mgaf, ZeroHeadGivesMidpoint) {
  Rng rng(21);
  Mgaf<double> mgaf(3, rng);
  mgaf.fc_weight.fill(0.0);
  mgaf.fc_bias.fill(0.0);
  const auto f0 = random_tensor<double>(Shape{2, 3, 2, 2}, rng);
  const auto f1 = random_tensor<double>(Shape{2, 3, 2, 2}, rng);
  GradTape<double> tape;
  Var lambda{};
  const Var out = mgaf.forward(tape, tape.constant(f0), tape.constant(f1), &lambda);
  for (double l : tape.value(lambda).data()) EXPECT_EQ(l, 0.5);
  for (std::size_t i = 0; i < f0.size(); ++i) EXPECT_NEAR(tape.value(out)[i], 0.5 * (f0[i] + f1[i]), 1e-15);
}

template <typename To, typename From>
Mgaf<To> cast_mgaf(const Mgaf<From>& m) {
  Mgaf<To> out;
  out.kernel = m.kernel.template cast<To>();
  out.fc_weight = m.fc_weight.template cast<To>();
  out.fc_bias = m.fc_bias.template cast<To>();
  return out;
}

// Float32 rounds the larger weight to exactly 1 once the logit gap exceeds
// ~16.6, so strict positivity of both weights is asserted on the same draw
// replayed in double; sum, range and convexity are asserted in float32.
TEST(MgafProperty, WeightsAreAConvexPairPerRow) {
  Rng rng(22);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t c = 1 + rng.below(8);
    Mgaf<double> wide(c, rng);
    Mgaf<float> mgaf = cast_mgaf<float>(wide);
    const Shape s{1 + rng.below(3), c, 1 + rng.below(4), 1 + rng.below(4)};
    const auto f0 = random_tensor<float>(s, rng, -3, 3);
    const auto f1 = random_tensor<float>(s, rng, -3, 3);
    GradTape<float> tape;
    Var lambda{};
    const auto& out = tape.value(mgaf.forward(tape, tape.constant(f0), tape.constant(f1), &lambda));
    const auto& l = tape.value(lambda);
    GradTape<double> replay;
    Var lambda_wide{};
    wide.forward(replay, replay.constant(f0.cast<double>()), replay.constant(f1.cast<double>()), &lambda_wide);
    const auto& lw = replay.value(lambda_wide);
    ASSERT_EQ(l.shape(), (Shape{s.n, 2, 1, 1}));
    for (std::size_t n = 0; n < s.n; ++n) {
      const float l0 = l(n, 0, 0, 0), l1 = l(n, 1, 0, 0);
      ASSERT_GE(l0, 0.0f);
      ASSERT_LE(l0, 1.0f);
      ASSERT_GE(l1, 0.0f);
      ASSERT_LE(l1, 1.0f);
      ASSERT_NEAR(l0 + l1, 1.0f, 1e-6);
      ASSERT_GT(lw(n, 0, 0, 0), 0.0);
      ASSERT_LT(lw(n, 0, 0, 0), 1.0);
      ASSERT_GT(lw(n, 1, 0, 0), 0.0);
      ASSERT_LT(lw(n, 1, 0, 0), 1.0);
      ASSERT_NEAR(lw(n, 0, 0, 0) + lw(n, 1, 0, 0), 1.0, 1e-12);
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
      const float lo = std::min(f0[i], f1[i]), hi = std::max(f0[i], f1[i]);
      const float slack = 1e-6f * std::max(1.0f, std::abs(hi));
      ASSERT_GE(out[i], lo - slack);
      ASSERT_LE(out[i], hi + slack);
    }
  }
}

TEST(Mgaf, ShapeMismatchRejected) {
  Rng rng(23);
  Mgaf<float> mgaf(2, rng);
  GradTape<float> tape;
  const Var a = tape.constant(Tensor<float>(Shape{1, 2, 2, 2}));
  const Var b = tape.constant(Tensor<float>(Shape{1, 2, 2, 3}));
  EXPECT_THROW(mgaf.forward(tape, a, b), ContractViolation);
}

TEST(Mgaf, WeightsComputedPerRow) {
  Rng rng(24);
  Mgaf<double> mgaf(2, rng);
  auto f0 = random_tensor<double>(Shape{2, 2, 2, 2}, rng);
  auto f1 = random_tensor<double>(Shape{2, 2, 2, 2}, rng);
  // Row 1 gets very different content; row 0's weights must not move.
  GradTape<double> t1;
  Var l1{};
  mgaf.forward(t1, t1.constant(f0), t1.constant(f1), &l1);
  for (std::size_t i = 8; i < 16; ++i) f0[i] *= 5.0;
  GradTape<double> t2;
  Var l2{};
  mgaf.forward(t2, t2.constant(f0), t2.constant(f1), &l2);
  EXPECT_EQ(t1.value(l1)(0, 0, 0, 0), t2.value(l2)(0, 0, 0, 0));
  EXPECT_EQ(t1.value(l1)(0, 1, 0, 0), t2.value(l2)(0, 1, 0, 0));
}

// ---------------------------------------------------------------- MGIL

TEST(Mgil, ConfigValidation) {
  MgilConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.lie_depth_flie = 0;
  EXPECT_THROW(cfg.validate(), ContractViolation);
  cfg.lie_depth_flie = 1;
  cfg.dilation_rates = {};
  EXPECT_THROW(cfg.validate(), ContractViolation);
  cfg.cii_enabled = false;
  EXPECT_NO_THROW(cfg.validate());
  cfg.cii_enabled = true;
  cfg.dilation_rates = {1, 2};
  EXPECT_THROW(cfg.validate(), ContractViolation);
  EXPECT_EQ(MgilConfig{}.resolved_out(), MgilConfig{}.in_channels);
}

TEST(Mgil, ChannelMismatchNamesDimension) {
  Rng rng(30);
  MgilConfig cfg;
  cfg.in_channels = 3;
  Mgil<float> block(cfg, rng);
  try {
    run_forward(block, Tensor<float>(Shape{1, 2, 4, 4}), Mode::train);
    FAIL() << "channel mismatch accepted";
  } catch (const ContractViolation& e) {
    EXPECT_NE(std::string(e.what()).find("dimension C"), std::string::npos) << e.what();
  }
}

TEST(MgilProperty, ShapeMatchesStridedConv) {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const Shape s = random_even_shape(rng);
    MgilConfig cfg;
    cfg.in_channels = s.c;
    cfg.cii_input = rng.below(2) == 0 ? CiiInput::raw : CiiInput::sct;
    Mgil<float> block(cfg, rng);
    StridedConvDown<float> strided(s.c, s.c, Normalization::batch, rng);
    const auto x = random_tensor<float>(s, rng);
    EXPECT_EQ(run_forward(block, x, Mode::train).shape(), run_forward(strided, x, Mode::train).shape());
  }
}

TEST(Mgil, AdditiveAndAdaptiveShareIntermediates) {
  for (auto wiring : {CiiInput::raw, CiiInput::sct}) {
    MgilConfig adaptive;
    adaptive.in_channels = 2;
    adaptive.out_channels = 3;
    adaptive.cii_input = wiring;
    MgilConfig additive = adaptive;
    additive.fusion = Fusion::additive;
    Rng ra(40), rb(40);
    Mgil<float> a(adaptive, ra);
    Mgil<float> b(additive, rb);
    ASSERT_TRUE(a.mgaf.has_value());
    ASSERT_FALSE(b.mgaf.has_value());
    Rng rng(41);
    const auto x = random_tensor<float>(Shape{2, 2, 8, 8}, rng);
    GradTape<float> ta, tb;
    MgilTrace tra, trb;
    const Var ya = a.forward(ta, ta.constant(x), Mode::train, &tra);
    const Var yb = b.forward(tb, tb.constant(x), Mode::train, &trb);
    ASSERT_TRUE(tra.has_coarse && trb.has_coarse && tra.has_lambda && !trb.has_lambda);
    EXPECT_TRUE(bitwise_equal(ta.value(tra.fine), tb.value(trb.fine)));
    EXPECT_TRUE(bitwise_equal(ta.value(tra.coarse), tb.value(trb.coarse)));
    // Additive output is exactly F0 + F1; adaptive output is the lambda blend.
    EXPECT_TRUE(bitwise_equal(tb.value(yb), add(tb.value(trb.fine), tb.value(trb.coarse))));
    EXPECT_TRUE(
        bitwise_equal(ta.value(ya), weighted_sum(ta.value(tra.lambda), ta.value(tra.fine), ta.value(tra.coarse))));
  }
}

TEST(Mgil, DegenerateConfigIsSpdConvBitwise) {
  Rng rng(50);
  for (int trial = 0; trial < 100; ++trial) {
    const Shape s = random_even_shape(rng);
    MgilConfig cfg;
    cfg.in_channels = s.c;
    cfg.out_channels = 1 + rng.below(4);
    cfg.lie_depth_flie = 1;
    cfg.lie_depth_cii = 0;
    cfg.cii_enabled = false;
    Mgil<float> block(cfg, rng);
    ASSERT_FALSE(block.cii.has_value());
    ASSERT_FALSE(block.mgaf.has_value());
    SpdConv<float> spd(s.c, cfg.out_channels, Normalization::batch, rng);
    spd.unit.conv = block.flie.lie.units[0].conv;
    const auto x = random_tensor<float>(s, rng);
    ASSERT_TRUE(bitwise_equal(run_forward(block, x, Mode::train), run_forward(spd, x, Mode::train)));
  }
}

TEST(Mgil, EndToEndGradientMatchesFiniteDifferences) {
  for (auto fusion : {Fusion::adaptive, Fusion::additive}) {
    Rng rng(60);
    MgilConfig cfg;
    cfg.in_channels = 2;
    cfg.fusion = fusion;
    Mgil<double> block(cfg, rng);
    auto x = random_tensor<double>(Shape{1, 2, 4, 4}, rng);
    ParamList<double> params;
    block.collect(params, "");
    std::vector<Tensor<double>*> wrt{&x};
    for (auto& p : params) {
      if (p.trainable) wrt.push_back(p.tensor);
    }
    for (auto* t : wrt) {
      t->ensure_grad();
      t->zero_grad();
    }
    GradTape<double> tape;
    const Var y = block.forward(tape, tape.parameter(x), Mode::train);
    const auto direction = random_tensor<double>(tape.value(y).shape(), rng);
    tape.backward(y, direction);
    std::vector<std::vector<double>> analytic;
    for (auto* t : wrt) analytic.emplace_back(t->grad().begin(), t->grad().end());
    auto loss = [&] {
      GradTape<double> t;
      return testing::dot(t.value(block.forward(t, t.constant(x), Mode::train)), direction);
    };
    EXPECT_LT(testing::fd_max_rel_error(loss, wrt, analytic), 1e-4);
  }
}

TEST(Mgil, ParameterNamesAreUnique) {
  Rng rng(61);
  MgilConfig cfg;
  cfg.in_channels = 2;
  Mgil<float> block(cfg, rng);
  ParamList<float> params;
  block.collect(params, "down.");
  std::set<std::string> names;
  for (const auto& p : params) EXPECT_TRUE(names.insert(p.name).second) << p.name;
  EXPECT_TRUE(names.count("down.flie.lie.0.conv.weight"));
  EXPECT_TRUE(names.count("down.cii.mrie.branch1.weight"));
  EXPECT_TRUE(names.count("down.mgaf.fc.weight"));
  EXPECT_TRUE(names.count("down.flie.lie.2.bn.running_var"));
}

// ---------------------------------------------------------------- drop-in

TEST(DownsamplerProperty, AllKindsAgreeOnShape) {
  const DownsamplerKind kinds[] = {DownsamplerKind::strided_conv, DownsamplerKind::max_pool, DownsamplerKind::spd_conv,
                                   DownsamplerKind::mgil};
  Rng rng(70);
  for (int trial = 0; trial < 100; ++trial) {
    const Shape s = random_even_shape(rng);
    const std::size_t out = rng.below(2) == 0 ? s.c : 1 + rng.below(5);
    const auto x = random_tensor<float>(s, rng);
    for (auto kind : kinds) {
      auto down = Downsampler<float>::make(kind, s.c, out, MgilConfig{}, Normalization::batch, rng);
      ASSERT_EQ(down.kind(), kind);
      ASSERT_EQ(run_forward(down, x, Mode::train).shape(), (Shape{s.n, out, s.h / 2, s.w / 2})) << to_string(kind);
    }
  }
}

TEST(Downsampler, OddInputRejectedByEveryKind) {
  Rng rng(71);
  for (auto kind : {DownsamplerKind::strided_conv, DownsamplerKind::max_pool, DownsamplerKind::spd_conv,
                    DownsamplerKind::mgil}) {
    auto down = Downsampler<float>::make(kind, 2, 2, MgilConfig{}, Normalization::batch, rng);
    EXPECT_THROW(run_forward(down, Tensor<float>(Shape{1, 2, 5, 4}), Mode::train), ContractViolation) << to_string(kind);
  }
}

TEST(Downsampler, StridedConvMatchesNaiveLoop) {
  Rng rng(72);
  StridedConvDown<float> down(3, 4, Normalization::none, rng);
  down.unit.activation = false;
  down.unit.conv.bias = random_tensor<float>(down.unit.conv.bias.shape(), rng);
  const auto x = random_tensor<float>(Shape{2, 3, 8, 6}, rng);
  const auto& c = down.unit.conv;
  EXPECT_TRUE(bitwise_equal(run_forward(down, x, Mode::train), testing::naive_conv2d(x, c.weight, c.bias, 2, 1, 1)));
}

TEST(Downsampler, PoolWithoutProjectionHasNoParameters) {
  Rng rng(73);
  PoolDown<float> same(3, 3, Normalization::batch, rng);
  ParamList<float> params;
  same.collect(params, "");
  EXPECT_TRUE(params.empty());
  PoolDown<float> wider(3, 5, Normalization::batch, rng);
  wider.collect(params, "");
  EXPECT_FALSE(params.empty());
}

}  // namespace
}  // namespace mgil
