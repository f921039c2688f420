#include "mgil/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>

#include "mgil/ad.hpp"
#include "mgil/blocks.hpp"
#include "mgil/losses.hpp"
#include "mgil/sct.hpp"

namespace mgil {

double gradcheck_relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-2});
}

namespace {

double project(const Tensor<double>& value, const Tensor<double>& direction) {
  double s = 0;
  for (std::size_t i = 0; i < value.size(); ++i) s += value[i] * direction[i];
  return s;
}

std::vector<std::size_t> pick_coordinates(std::size_t size, std::size_t cap, Rng& rng) {
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (size <= cap) return idx;
  for (std::size_t i = 0; i < cap; ++i) std::swap(idx[i], idx[i + rng.below(size - i)]);
  idx.resize(cap);
  return idx;
}

Tensor<double> uniform_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(s);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Values bounded away from zero, so ReLU kinks are never straddled.
Tensor<double> off_zero_tensor(Shape s, Rng& rng) {
  Tensor<double> t(s);
  for (auto& v : t.data()) v = (rng.below(2) == 0 ? -1.0 : 1.0) * rng.uniform(0.05, 1.0);
  return t;
}

/// Distinct values at least 0.01 apart, so no 2x2 window has a near tie.
Tensor<double> spaced_tensor(Shape s, Rng& rng) {
  Tensor<double> t(s);
  std::vector<std::size_t> order(t.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.01 * static_cast<double>(order[i]) + rng.uniform(0.0, 0.002);
  return t;
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

template <typename Block>
GradcheckInstance check_block(Block& block, Tensor<double> x, Mode mode, Rng& rng) {
  ParamList<double> params;
  block.collect(params, "");
  std::vector<Tensor<double>*> wrt{&x};
  for (auto& p : params) {
    if (p.trainable) wrt.push_back(p.tensor);
  }
  return check_graph([&](GradTape<double>& t) { return block.forward(t, t.parameter(x), mode); }, wrt, rng);
}

Shape block_input(Rng& rng, std::size_t channels) { return Shape{pick(rng, 1, 2) + 1, channels, 2 * pick(rng, 2, 3), 2 * pick(rng, 2, 3)}; }

MgilConfig small_mgil(Rng& rng) {
  MgilConfig cfg;
  cfg.in_channels = pick(rng, 1, 2);
  cfg.out_channels = pick(rng, 1, 3);
  cfg.lie_depth_flie = pick(rng, 1, 2);
  cfg.lie_depth_cii = pick(rng, 0, 2);
  return cfg;
}

GradcheckCase block_case(std::string op, std::function<GradcheckInstance(Rng&)> fn) { return {std::move(op), std::move(fn)}; }

}  // namespace

GradcheckInstance check_graph(const GraphBuilder& build, const std::vector<Tensor<double>*>& wrt, Rng& rng,
                              std::size_t max_coords_per_tensor, double step) {
  for (auto* t : wrt) {
    t->ensure_grad();
    t->zero_grad();
  }
  Tensor<double> direction;
  {
    GradTape<double> tape;
    const Var out = build(tape);
    direction = uniform_tensor(tape.value(out).shape(), rng);
    tape.backward(out, direction);
  }
  std::vector<std::vector<double>> analytic;
  for (auto* t : wrt) analytic.emplace_back(t->grad().begin(), t->grad().end());

  auto loss = [&] {
    GradTape<double> tape;
    const Var out = build(tape);
    return project(tape.value(out), direction);
  };

  const double base = loss();
  GradcheckInstance result;
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    auto data = wrt[k]->data();
    for (std::size_t i : pick_coordinates(data.size(), max_coords_per_tensor, rng)) {
      const double saved = data[i];
      auto probe = [&](double offset) {
        data[i] = saved + offset;
        const double v = loss();
        data[i] = saved;
        return v;
      };
      const double up = probe(step);
      const double down = probe(-step);
      double numeric = (up - down) / (2 * step);
      // A coordinate that fails at the nominal step is re-probed only when
      // the function is non-smooth inside the probe interval. For a smooth
      // function the second difference shrinks 100x when the step shrinks
      // 10x; a ReLU or max-pool switch breaks that scaling. There the central
      // difference measures the jump, so the derivative is taken inside the
      // smooth piece with a finer step.
      if (gradcheck_relative_error(analytic[k][i], numeric) > kGradcheckTolerance) {
        const double tenth = step / 10;
        const double curvature = up - 2 * base + down;
        const double curvature_tenth = probe(tenth) - 2 * base + probe(-tenth);
        const double ratio = std::abs(curvature) / std::abs(curvature_tenth);
        if (!(ratio >= 50 && ratio <= 200)) {
          const double fine = step * kKinkStepFactor;
          numeric = (probe(fine) - probe(-fine)) / (2 * fine);
          ++result.kink_reprobes;
        }
      }
      result.max_rel_error = std::max(result.max_rel_error, gradcheck_relative_error(analytic[k][i], numeric));
      ++result.coordinates;
    }
  }
  for (auto* t : wrt) t->drop_grad();
  return result;
}

GradcheckCase conv2d_gradcheck_case(ConvBackwardFn backward) {
  return {"conv2d", [backward](Rng& rng) {
            ConvLayer<double> layer;
            Shape in;
            for (;;) {
              const std::size_t k = rng.below(2) == 0 ? 1 : 3;
              layer = ConvLayer<double>::zeros(pick(rng, 1, 3), pick(rng, 1, 3), k, pick(rng, 1, 2), pick(rng, 1, 2),
                                               pick(rng, 0, 2));
              in = Shape{pick(rng, 1, 2), layer.in_channels(), pick(rng, 3, 7), pick(rng, 3, 7)};
              if (layer.extent() <= in.h + 2 * layer.padding && layer.extent() <= in.w + 2 * layer.padding) break;
            }
            layer.weight = uniform_tensor(layer.weight.shape(), rng);
            layer.bias = uniform_tensor(layer.bias.shape(), rng);
            Tensor<double> x = uniform_tensor(in, rng);
            auto build = [&](GradTape<double>& t) {
              const Var xv = t.parameter(x);
              const Var w = t.parameter(layer.weight);
              const Var b = t.parameter(layer.bias);
              return t.record(conv2d(x, layer), {xv, w, b}, [&, xv, w, b](GradTape<double>& tp, const Tensor<double>& g) {
                auto grads = backward(g, x, layer);
                tp.accumulate(xv, std::move(grads.input));
                tp.accumulate(w, std::move(grads.weight));
                tp.accumulate(b, std::move(grads.bias));
              });
            };
            return check_graph(build, {&x, &layer.weight, &layer.bias}, rng);
          }};
}

std::vector<GradcheckCase> default_gradcheck_cases() {
  std::vector<GradcheckCase> cases;
  cases.push_back(conv2d_gradcheck_case([](const Tensor<double>& g, const Tensor<double>& x, const ConvLayer<double>& l) {
    return conv2d_backward(g, x, l);
  }));

  cases.push_back(block_case("relu", [](Rng& rng) {
    Tensor<double> x = off_zero_tensor(Shape{2, 3, 3, 3}, rng);
    return check_graph([&](GradTape<double>& t) { return ad::relu(t, t.parameter(x)); }, {&x}, rng);
  }));

  cases.push_back(block_case("concat_channels", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 2), h = pick(rng, 1, 4), w = pick(rng, 1, 4);
    std::vector<Tensor<double>> parts;
    for (std::size_t i = 0, count = pick(rng, 2, 3); i < count; ++i) parts.push_back(uniform_tensor(Shape{n, pick(rng, 1, 3), h, w}, rng));
    std::vector<Tensor<double>*> wrt;
    for (auto& p : parts) wrt.push_back(&p);
    return check_graph(
        [&](GradTape<double>& t) {
          std::vector<Var> vars;
          for (auto& p : parts) vars.push_back(t.parameter(p));
          return ad::concat_channels(t, vars);
        },
        wrt, rng);
  }));

  cases.push_back(block_case("global_avg_pool", [](Rng& rng) {
    Tensor<double> x = uniform_tensor(Shape{pick(rng, 1, 2), pick(rng, 1, 4), pick(rng, 1, 5), pick(rng, 1, 5)}, rng);
    return check_graph([&](GradTape<double>& t) { return ad::global_avg_pool(t, t.parameter(x)); }, {&x}, rng);
  }));

  cases.push_back(block_case("fully_connected", [](Rng& rng) {
    const std::size_t in = pick(rng, 1, 6), out = pick(rng, 1, 4);
    Tensor<double> x = uniform_tensor(Shape{pick(rng, 1, 3), in, 1, 1}, rng);
    Tensor<double> w = uniform_tensor(Shape{out, in, 1, 1}, rng);
    Tensor<double> b = uniform_tensor(Shape{out, 1, 1, 1}, rng);
    return check_graph([&](GradTape<double>& t) { return ad::fully_connected(t, t.parameter(x), w, b); }, {&x, &w, &b},
                       rng);
  }));

  cases.push_back(block_case("conv1d_channels", [](Rng& rng) {
    const std::size_t len = pick(rng, 3, 8);
    std::size_t k = 2 * pick(rng, 0, 2) + 1;
    if (k > len) k = 1;
    Tensor<double> x = uniform_tensor(Shape{pick(rng, 1, 3), len, 1, 1}, rng);
    Tensor<double> kernel = uniform_tensor(Shape{1, 1, 1, k}, rng);
    return check_graph([&](GradTape<double>& t) { return ad::conv1d_channels(t, t.parameter(x), kernel); },
                       {&x, &kernel}, rng);
  }));

  cases.push_back(block_case("softmax_rows", [](Rng& rng) {
    Tensor<double> x = uniform_tensor(Shape{pick(rng, 1, 3), pick(rng, 2, 5), 1, 1}, rng, -3.0, 3.0);
    return check_graph([&](GradTape<double>& t) { return ad::softmax_rows(t, t.parameter(x)); }, {&x}, rng);
  }));

  cases.push_back(block_case("add", [](Rng& rng) {
    const Shape s{2, 2, 3, 3};
    Tensor<double> a = uniform_tensor(s, rng), b = uniform_tensor(s, rng);
    return check_graph([&](GradTape<double>& t) { return ad::add(t, t.parameter(a), t.parameter(b)); }, {&a, &b}, rng);
  }));

  cases.push_back(block_case("scale", [](Rng& rng) {
    Tensor<double> a = uniform_tensor(Shape{2, 2, 3, 3}, rng);
    const double factor = rng.uniform(-2.0, 2.0);
    return check_graph([&](GradTape<double>& t) { return ad::scale(t, t.parameter(a), factor); }, {&a}, rng);
  }));

  cases.push_back(block_case("weighted_sum", [](Rng& rng) {
    const Shape s{pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)};
    Tensor<double> lambda = uniform_tensor(Shape{s.n, 2, 1, 1}, rng, 0.0, 1.0);
    Tensor<double> f0 = uniform_tensor(s, rng), f1 = uniform_tensor(s, rng);
    return check_graph(
        [&](GradTape<double>& t) { return ad::weighted_sum(t, t.parameter(lambda), t.parameter(f0), t.parameter(f1)); },
        {&lambda, &f0, &f1}, rng);
  }));

  cases.push_back(block_case("max_pool2d", [](Rng& rng) {
    Tensor<double> x = spaced_tensor(Shape{pick(rng, 1, 2), pick(rng, 1, 3), 2 * pick(rng, 1, 3), 2 * pick(rng, 1, 3)}, rng);
    return check_graph([&](GradTape<double>& t) { return ad::max_pool2d(t, t.parameter(x)); }, {&x}, rng);
  }));

  cases.push_back(block_case("batch_norm_train", [](Rng& rng) {
    const std::size_t c = pick(rng, 1, 3);
    BatchNorm2d<double> bn(c);
    bn.gamma = uniform_tensor(bn.gamma.shape(), rng, 0.5, 1.5);
    bn.beta = uniform_tensor(bn.beta.shape(), rng);
    return check_block(bn, uniform_tensor(Shape{2, c, pick(rng, 2, 4), pick(rng, 2, 4)}, rng), Mode::train, rng);
  }));

  cases.push_back(block_case("batch_norm_eval", [](Rng& rng) {
    const std::size_t c = pick(rng, 1, 3);
    BatchNorm2d<double> bn(c);
    bn.gamma = uniform_tensor(bn.gamma.shape(), rng, 0.5, 1.5);
    bn.beta = uniform_tensor(bn.beta.shape(), rng);
    bn.running_mean = uniform_tensor(bn.running_mean.shape(), rng);
    bn.running_var = uniform_tensor(bn.running_var.shape(), rng, 0.5, 2.0);
    return check_block(bn, uniform_tensor(Shape{2, c, 3, 3}, rng), Mode::eval, rng);
  }));

  cases.push_back(block_case("sct", [](Rng& rng) {
    Tensor<double> x = uniform_tensor(Shape{pick(rng, 1, 2), pick(rng, 1, 3), 2 * pick(rng, 1, 3), 2 * pick(rng, 1, 3)}, rng);
    return check_graph([&](GradTape<double>& t) { return ad::sct(t, t.parameter(x)); }, {&x}, rng);
  }));

  cases.push_back(block_case("lie_block", [](Rng& rng) {
    const std::size_t in = pick(rng, 1, 3);
    LieBlock<double> lie(in, pick(rng, 1, 3), pick(rng, 1, 3), Normalization::batch, rng);
    return check_block(lie, uniform_tensor(block_input(rng, in), rng), Mode::train, rng);
  }));

  cases.push_back(block_case("flie", [](Rng& rng) {
    const std::size_t in = pick(rng, 1, 2);
    Flie<double> flie(in, pick(rng, 1, 3), pick(rng, 1, 3), Normalization::batch, rng);
    return check_block(flie, uniform_tensor(block_input(rng, in), rng), Mode::train, rng);
  }));

  cases.push_back(block_case("mrie", [](Rng& rng) {
    const std::size_t in = pick(rng, 1, 2);
    Mrie<double> mrie(in, pick(rng, 1, 3), {1, 2, 3}, 2, Normalization::batch, rng);
    return check_block(mrie, uniform_tensor(block_input(rng, in), rng), Mode::train, rng);
  }));

  cases.push_back(block_case("cii", [](Rng& rng) {
    const std::size_t in = pick(rng, 1, 2);
    Cii<double> cii(in, pick(rng, 1, 3), {2, 3}, 2, pick(rng, 0, 2), Normalization::batch, rng);
    return check_block(cii, uniform_tensor(block_input(rng, in), rng), Mode::train, rng);
  }));

  cases.push_back(block_case("mgaf", [](Rng& rng) {
    const std::size_t c = pick(rng, 1, 4);
    Mgaf<double> mgaf(c, rng);
    const Shape s{pick(rng, 1, 3), c, pick(rng, 1, 3), pick(rng, 1, 3)};
    Tensor<double> f0 = uniform_tensor(s, rng), f1 = uniform_tensor(s, rng);
    return check_graph([&](GradTape<double>& t) { return mgaf.forward(t, t.parameter(f0), t.parameter(f1)); },
                       {&f0, &f1, &mgaf.kernel, &mgaf.fc_weight, &mgaf.fc_bias}, rng);
  }));

  cases.push_back(block_case("mgil_adaptive", [](Rng& rng) {
    MgilConfig cfg = small_mgil(rng);
    Mgil<double> block(cfg, rng);
    return check_block(block, uniform_tensor(block_input(rng, cfg.in_channels), rng), Mode::train, rng);
  }));

  cases.push_back(block_case("mgil_additive", [](Rng& rng) {
    MgilConfig cfg = small_mgil(rng);
    cfg.fusion = Fusion::additive;
    Mgil<double> block(cfg, rng);
    return check_block(block, uniform_tensor(block_input(rng, cfg.in_channels), rng), Mode::train, rng);
  }));

  cases.push_back(block_case("mgil_sct_wired", [](Rng& rng) {
    MgilConfig cfg = small_mgil(rng);
    cfg.cii_input = CiiInput::sct;
    Mgil<double> block(cfg, rng);
    return check_block(block, uniform_tensor(block_input(rng, cfg.in_channels), rng), Mode::train, rng);
  }));

  cases.push_back(block_case("spd_conv", [](Rng& rng) {
    const std::size_t in = pick(rng, 1, 3);
    SpdConv<double> spd(in, pick(rng, 1, 3), Normalization::batch, rng);
    return check_block(spd, uniform_tensor(block_input(rng, in), rng), Mode::train, rng);
  }));

  cases.push_back(block_case("strided_conv_down", [](Rng& rng) {
    const std::size_t in = pick(rng, 1, 3);
    StridedConvDown<double> down(in, pick(rng, 1, 3), Normalization::batch, rng);
    return check_block(down, uniform_tensor(block_input(rng, in), rng), Mode::train, rng);
  }));

  cases.push_back(block_case("max_pool_down", [](Rng& rng) {
    const std::size_t in = pick(rng, 1, 2);
    PoolDown<double> down(in, in + 1, Normalization::batch, rng);
    return check_block(down, spaced_tensor(block_input(rng, in), rng), Mode::train, rng);
  }));

  cases.push_back(block_case("cross_entropy", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 4), k = pick(rng, 2, 6);
    Tensor<double> logits = uniform_tensor(Shape{n, k, 1, 1}, rng, -3.0, 3.0);
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(rng.below(k));
    return check_graph([&](GradTape<double>& t) { return ad::cross_entropy(t, t.parameter(logits), labels); },
                       {&logits}, rng);
  }));

  cases.push_back(block_case("mse", [](Rng& rng) {
    const Shape s{pick(rng, 1, 2), pick(rng, 1, 2), pick(rng, 1, 4), pick(rng, 1, 4)};
    Tensor<double> pred = uniform_tensor(s, rng);
    const Tensor<double> target = uniform_tensor(s, rng);
    return check_graph([&](GradTape<double>& t) { return ad::mse(t, t.parameter(pred), target); }, {&pred}, rng);
  }));

  return cases;
}

std::vector<GradcheckResult> run_gradcheck(const std::vector<GradcheckCase>& cases, std::size_t instances,
                                           double tolerance, std::uint64_t seed) {
  std::vector<GradcheckResult> results;
  for (const auto& c : cases) {
    Rng rng(derive_seed(seed, c.op));
    GradcheckResult r{c.op, 0.0, instances, 0, 0, false};
    for (std::size_t i = 0; i < instances; ++i) {
      const GradcheckInstance one = c.instance(rng);
      r.max_rel_error = std::max(r.max_rel_error, one.max_rel_error);
      r.coordinates += one.coordinates;
      r.kink_reprobes += one.kink_reprobes;
    }
    r.passed = r.max_rel_error <= tolerance;
    results.push_back(r);
  }
  return results;
}

void print_gradcheck_report(std::ostream& os, const std::vector<GradcheckResult>& results, double tolerance) {
  os << std::left << std::setw(20) << "op" << std::setw(14) << "max_rel_err" << std::setw(11) << "instances"
     << std::setw(13) << "coordinates" << std::setw(9) << "reprobed" << "status\n";
  for (const auto& r : results) {
    os << std::left << std::setw(20) << r.op << std::setw(14) << std::scientific << std::setprecision(3)
       << r.max_rel_error << std::defaultfloat << std::setw(11) << r.instances << std::setw(13) << r.coordinates
       << std::setw(9) << r.kink_reprobes << (r.passed ? "PASS" : "FAIL") << '\n';
  }
  os << "tolerance " << tolerance << '\n';
}

}  // namespace mgil
