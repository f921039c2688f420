#include <gtest/gtest.h>

#include <sstream>

#include "mgil/gradcheck.hpp"

namespace mgil {
namespace {

TEST(Gradcheck, RelativeErrorUsesFloor) {
  EXPECT_DOUBLE_EQ(gradcheck_relative_error(1.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(gradcheck_relative_error(2.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(gradcheck_relative_error(1e-6, 0.0), 1e-4);
}

TEST(Gradcheck, EveryRegisteredOpPasses) {
  const auto results = run_gradcheck(default_gradcheck_cases());
  ASSERT_GE(results.size(), 20u);
  for (const auto& r : results) {
    EXPECT_TRUE(r.passed) << r.op << " max relative error " << r.max_rel_error;
    EXPECT_EQ(r.instances, kGradcheckInstances);
    EXPECT_GT(r.coordinates, 0u) << r.op;
  }
}

TEST(Gradcheck, CatchesCorruptedConvBackward) {
  // Flip the sign of one weight-gradient entry.
  auto corrupted = conv2d_gradcheck_case([](const Tensor<double>& g, const Tensor<double>& x, const ConvLayer<double>& l) {
    auto grads = conv2d_backward(g, x, l);
    grads.weight[0] = -grads.weight[0] + 0.5;
    return grads;
  });
  const auto results = run_gradcheck({corrupted});
  ASSERT_EQ(results.size(), 1u);
  EXPECT_FALSE(results[0].passed);
  EXPECT_GT(results[0].max_rel_error, 1e-2);

  std::ostringstream report;
  print_gradcheck_report(report, results, kGradcheckTolerance);
  EXPECT_NE(report.str().find("conv2d"), std::string::npos);
  EXPECT_NE(report.str().find("FAIL"), std::string::npos);
}

TEST(Gradcheck, SameSeedSameReport) {
  auto cases = default_gradcheck_cases();
  cases.resize(3);
  const auto a = run_gradcheck(cases, 3);
  const auto b = run_gradcheck(cases, 3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].max_rel_error, b[i].max_rel_error);
    EXPECT_EQ(a[i].coordinates, b[i].coordinates);
  }
}

}  // namespace
}  // namespace mgil
