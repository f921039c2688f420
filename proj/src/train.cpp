#include "mgil/train.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include "mgil/losses.hpp"

namespace mgil {

bool RunRecord::same_trajectory(const RunRecord& other) const {
  if (seed != other.seed || config_hash != other.config_hash || epochs.size() != other.epochs.size()) return false;
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    const auto& a = epochs[i];
    const auto& b = other.epochs[i];
    if (a.epoch != b.epoch || std::memcmp(&a.train_loss, &b.train_loss, sizeof(double)) != 0 ||
        std::memcmp(&a.metric, &b.metric, sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

std::size_t steps_per_epoch(std::size_t samples, std::size_t batch_size) {
  require(batch_size > 0, "batch_size must be positive");
  return (samples + batch_size - 1) / batch_size;
}

double evaluate(Net<float>& net, const Dataset& data, double pck_fraction, std::size_t batch_size) {
  if (data.empty()) throw ContractViolation("evaluate: empty dataset");
  require(batch_size > 0, "evaluate: batch_size must be positive");
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
    idx.resize(std::min(batch_size, data.size() - begin));
    std::iota(idx.begin(), idx.end(), begin);
    const Batch batch = make_batch(data, idx);
    const Tensor<float> out = net.predict(batch.images, Mode::eval).output;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const Sample& s = data.samples[idx[i]];
      if (data.task == Task::classify) {
        const std::size_t k = out.shape().c;
        const float* logits = out.plane(i, 0);
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c) {
          if (logits[c] > logits[best]) best = c;
        }
        if (static_cast<int>(best) == s.label) ++correct;
      } else {
        const Shape& img = s.image.shape();
        const std::size_t stride = img.h / out.shape().h;
        const Keypoint p = decode_keypoints(out, i).front();
        const double dx = heatmap_to_image(p.x, stride) - s.kx;
        const double dy = heatmap_to_image(p.y, stride) - s.ky;
        const double diag = std::hypot(static_cast<double>(img.h), static_cast<double>(img.w));
        if (std::hypot(dx, dy) <= pck_fraction * diag) ++correct;
      }
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

Trainer::Trainer(Net<float>& net, const Dataset& train, const Dataset* eval, OptimConfig optim, TrainOptions options,
                 std::uint64_t seed)
    : net_(net),
      train_(train),
      eval_(eval),
      options_(options),
      optim_(optim, options.epochs * steps_per_epoch(train.size(), options.batch_size)),
      rng_(derive_seed(seed, "trainer")) {
  require(!train.empty(), "train: empty training set");
  record_.seed = seed;
}

double Trainer::train_step(std::span<const std::size_t> indices) {
  auto params = net_.parameters();
  zero_grads(params);
  std::vector<bool> flags;
  if (options_.flip && train_.task == Task::classify) {
    for (std::size_t i = 0; i < indices.size(); ++i) flags.push_back(rng_.below(2) == 1);
  }
  const Batch batch = make_batch(train_, indices, flags);

  GradTape<float> tape;
  // Divergent weights can surface inside the forward pass (adaptive fusion
  // softmax) or in its output, before any loss exists.
  Var y;
  try {
    y = net_.forward(tape, tape.constant(batch.images), Mode::train);
  } catch (const NonFiniteInput&) {
    throw NanLossError(step_);
  }
  for (float v : tape.value(y).data()) {
    if (!std::isfinite(v)) throw NanLossError(step_);
  }
  const Var loss = train_.task == Task::classify ? ad::cross_entropy(tape, y, batch.labels)
                                                 : ad::mse(tape, y, batch.heatmaps);
  const double value = tape.value(loss)[0];
  if (!std::isfinite(value)) throw NanLossError(step_);
  tape.backward(loss);
  optim_.step(params);
  ++step_;
  step_losses_.push_back(value);
  return value;
}

EpochRecord Trainer::run_epoch() {
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::size_t> order(train_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng_.below(i)]);

  double total = 0;
  std::size_t batches = 0;
  for (std::size_t begin = 0; begin < order.size(); begin += options_.batch_size) {
    const std::size_t count = std::min(options_.batch_size, order.size() - begin);
    total += train_step(std::span<const std::size_t>(order.data() + begin, count));
    ++batches;
  }
  ++epoch_;
  EpochRecord rec;
  rec.epoch = epoch_;
  rec.train_loss = total / static_cast<double>(batches);
  try {
    rec.metric = evaluate(net_, eval_ != nullptr ? *eval_ : train_, options_.pck_fraction);
  } catch (const NonFiniteInput&) {
    throw NanLossError(step_);
  }
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  record_.epochs.push_back(rec);
  return rec;
}

RunRecord Trainer::run(const std::function<void(const EpochRecord&)>& on_epoch) {
  while (epoch_ < options_.epochs) {
    const EpochRecord rec = run_epoch();
    if (on_epoch) on_epoch(rec);
  }
  return record_;
}

RunRecord train(Net<float>& net, const Dataset& train, const Dataset* eval, const OptimConfig& optim,
                const TrainOptions& options, std::uint64_t seed) {
  Trainer trainer(net, train, eval, optim, options, seed);
  return trainer.run();
}

// ---------------------------------------------------------------- ablation

std::vector<std::string> ablation_preset_names() {
  return {"components", "lie_depth", "lie_per_module", "fusion", "downsamplers"};
}

std::vector<AblationVariant> ablation_preset(const std::string& name) {
  auto mgil_variant = [](std::string label, std::size_t flie, std::size_t cii, bool cii_on, Fusion fusion) {
    AblationVariant v{std::move(label), DownsamplerKind::mgil, MgilConfig{}};
    v.mgil.lie_depth_flie = flie;
    v.mgil.lie_depth_cii = cii;
    v.mgil.cii_enabled = cii_on;
    v.mgil.fusion = fusion;
    return v;
  };
  if (name == "components") {
    return {AblationVariant{"baseline", DownsamplerKind::strided_conv, MgilConfig{}},
            mgil_variant("+FLIE", 3, 2, false, Fusion::adaptive),
            mgil_variant("+FLIE+CII", 3, 2, true, Fusion::additive),
            mgil_variant("+FLIE+CII+MGAF", 3, 2, true, Fusion::adaptive)};
  }
  if (name == "lie_depth") {
    std::vector<AblationVariant> out;
    for (std::size_t d = 1; d <= 4; ++d) out.push_back(mgil_variant("flie_depth_" + std::to_string(d), d, 2, true, Fusion::adaptive));
    return out;
  }
  if (name == "lie_per_module") {
    return {mgil_variant("flie1_cii-", 1, 0, true, Fusion::adaptive), mgil_variant("flie1_cii1", 1, 1, true, Fusion::adaptive),
            mgil_variant("flie2_cii-", 2, 0, true, Fusion::adaptive), mgil_variant("flie2_cii1", 2, 1, true, Fusion::adaptive),
            mgil_variant("flie2_cii2", 2, 2, true, Fusion::adaptive)};
  }
  if (name == "fusion") {
    return {mgil_variant("additive", 3, 2, true, Fusion::additive), mgil_variant("adaptive", 3, 2, true, Fusion::adaptive)};
  }
  if (name == "downsamplers") {
    return {AblationVariant{"strided_conv", DownsamplerKind::strided_conv, MgilConfig{}},
            AblationVariant{"max_pool", DownsamplerKind::max_pool, MgilConfig{}},
            AblationVariant{"spd_conv", DownsamplerKind::spd_conv, MgilConfig{}},
            AblationVariant{"mgil", DownsamplerKind::mgil, MgilConfig{}}};
  }
  throw ContractViolation("ablation: unknown preset '" + name + "'");
}

AblationTable ablate(const std::vector<AblationVariant>& grid, const std::vector<std::uint64_t>& seeds,
                     const AblationSetup& setup, const Dataset& train, const Dataset& test,
                     const std::function<void(const AblationRun&)>& on_run) {
  require(!grid.empty(), "ablate: empty grid");
  require(!seeds.empty(), "ablate: no seeds");
  AblationTable table;
  for (const auto& variant : grid) {
    for (std::uint64_t seed : seeds) {
      NetSpec spec = setup.net;
      spec.downsampler = variant.kind;
      spec.mgil = variant.mgil;
      Net<float> net(spec, seed);
      Trainer trainer(net, train, &test, setup.optim, setup.options, seed);
      trainer.record().config_hash = setup.config_hash;
      AblationRun run{variant, seed, trainer.run()};
      if (on_run) on_run(run);
      table.runs.push_back(std::move(run));
    }
  }
  return table;
}

std::vector<AblationCell> AblationTable::summary() const {
  std::vector<AblationCell> cells;
  std::vector<std::vector<double>> values;
  for (const auto& run : runs) {
    std::size_t i = 0;
    while (i < cells.size() && cells[i].variant != run.variant.name) ++i;
    if (i == cells.size()) {
      cells.push_back({run.variant.name, 0, 0, 0});
      values.emplace_back();
    }
    values[i].push_back(run.record.final_metric());
  }
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& v = values[i];
    cells[i].runs = v.size();
    cells[i].mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0;
    for (double x : v) ss += (x - cells[i].mean) * (x - cells[i].mean);
    cells[i].stddev = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  }
  return cells;
}

std::string csv_field(const std::string& value) {
  if (value.find_first_of(",\"\r\n") == std::string::npos) return value;
  std::string out = "\"";
  for (char c : value) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

namespace {

bool uses_flie(const AblationVariant& v) { return v.kind == DownsamplerKind::mgil; }
bool uses_cii(const AblationVariant& v) { return uses_flie(v) && v.mgil.cii_enabled; }
bool uses_mgaf(const AblationVariant& v) { return uses_cii(v) && v.mgil.fusion == Fusion::adaptive; }

}  // namespace

void AblationTable::write_csv(std::ostream& os) const {
  os << "downsampler,flie_depth,cii_depth,fusion,seed,metric\n";
  for (const auto& run : runs) {
    const auto& v = run.variant;
    const std::string flie = uses_flie(v) ? std::to_string(v.mgil.lie_depth_flie) : "";
    const std::string cii = uses_cii(v) ? std::to_string(v.mgil.lie_depth_cii) : "";
    const std::string fusion = !uses_cii(v) ? "none" : (v.mgil.fusion == Fusion::adaptive ? "adaptive" : "additive");
    std::ostringstream metric;
    metric << std::setprecision(17) << run.record.final_metric();
    os << csv_field(to_string(v.kind)) << ',' << flie << ',' << cii << ',' << fusion << ',' << run.seed << ','
       << metric.str() << '\n';
  }
}

std::string AblationTable::render() const {
  const auto cells = summary();
  std::size_t name_width = 7;
  for (const auto& c : cells) name_width = std::max(name_width, c.variant.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(name_width) + 2) << "variant" << "FLIE  CII   MGAF  metric (mean +- std, n)\n";
  for (const auto& c : cells) {
    const AblationVariant* v = nullptr;
    for (const auto& run : runs) {
      if (run.variant.name == c.variant) {
        v = &run.variant;
        break;
      }
    }
    auto mark = [](bool on) { return on ? "x     " : "-     "; };
    os << std::left << std::setw(static_cast<int>(name_width) + 2) << c.variant << mark(uses_flie(*v)) << mark(uses_cii(*v))
       << mark(uses_mgaf(*v)) << std::fixed << std::setprecision(4) << c.mean << " +- " << c.stddev << " (" << c.runs
       << ")\n";
  }
  return os.str();
}

}  // namespace mgil
