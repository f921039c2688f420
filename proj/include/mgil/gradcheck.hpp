#pragma once

// Central finite-difference verification of every differentiable op, run in
// 64-bit precision. Each case draws a random instance, reduces the op output
// to a scalar with a random projection, and compares tape gradients against
// (L(x + h) - L(x - h)) / 2h for inputs and every parameter.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "mgil/ops.hpp"
#include "mgil/random.hpp"
#include "mgil/tape.hpp"

namespace mgil {

inline constexpr double kGradcheckStep = 1e-4;
inline constexpr double kGradcheckTolerance = 1e-4;
inline constexpr std::size_t kGradcheckInstances = 20;
/// Step used, relative to the nominal step, when a probe straddles a kink.
inline constexpr double kKinkStepFactor = 1e-2;

/// |a - n| / max(|a|, |n|, 1e-2). The floor keeps near-zero gradients from
/// turning truncation noise into large ratios.
double gradcheck_relative_error(double analytic, double numeric);

/// Builds a forward graph on the given tape. Tensors listed in `wrt` must be
/// bound with GradTape::parameter inside `build`.
using GraphBuilder = std::function<Var(GradTape<double>&)>;

struct GradcheckInstance {
  double max_rel_error = 0;
  std::size_t coordinates = 0;
  std::size_t kink_reprobes = 0;
};

/// Compares tape gradients with central differences for up to
/// `max_coords_per_tensor` randomly chosen elements of each tensor in `wrt`.
/// A coordinate that fails at `step` and whose second difference does not
/// scale like a smooth function's is re-probed with a step scaled by
/// kKinkStepFactor; those are counted in kink_reprobes.
GradcheckInstance check_graph(const GraphBuilder& build, const std::vector<Tensor<double>*>& wrt, Rng& rng,
                              std::size_t max_coords_per_tensor = 64, double step = kGradcheckStep);

struct GradcheckCase {
  std::string op;
  std::function<GradcheckInstance(Rng&)> instance;
};

struct GradcheckResult {
  std::string op;
  double max_rel_error = 0;
  std::size_t instances = 0;
  std::size_t coordinates = 0;
  std::size_t kink_reprobes = 0;
  bool passed = false;
};

using ConvBackwardFn =
    std::function<ConvGrads<double>(const Tensor<double>&, const Tensor<double>&, const ConvLayer<double>&)>;

/// The conv2d case with an injectable backward, so a broken adjoint can be
/// shown to be caught.
GradcheckCase conv2d_gradcheck_case(ConvBackwardFn backward);

/// One case per registered differentiable op, including the composed blocks.
std::vector<GradcheckCase> default_gradcheck_cases();

std::vector<GradcheckResult> run_gradcheck(const std::vector<GradcheckCase>& cases,
                                           std::size_t instances = kGradcheckInstances,
                                           double tolerance = kGradcheckTolerance, std::uint64_t seed = 20240611);

void print_gradcheck_report(std::ostream& os, const std::vector<GradcheckResult>& results, double tolerance);

}  // namespace mgil
