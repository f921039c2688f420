#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mgil/data.hpp"
#include "mgil/nets.hpp"
#include "mgil/optim.hpp"

namespace mgil {

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double metric = 0;
  double seconds = 0;
};

struct RunRecord {
  std::vector<EpochRecord> epochs;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;

  /// Same seed, hash, epochs, losses and metrics, bit for bit. Wall-clock
  /// seconds are not compared.
  bool same_trajectory(const RunRecord& other) const;
  double final_metric() const { return epochs.empty() ? 0.0 : epochs.back().metric; }
};

/// Raised when a training step produces a non-finite loss.
class NanLossError : public std::runtime_error {
public:
  explicit NanLossError(std::size_t step)
      : std::runtime_error("training aborted: non-finite loss at step " + std::to_string(step)), step_(step) {}
  std::size_t step() const { return step_; }

private:
  std::size_t step_;
};

struct TrainOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  /// Random horizontal flips (classification only).
  bool flip = false;
  /// Fraction of the image diagonal used as the PCK threshold.
  double pck_fraction = 0.1;

  bool operator==(const TrainOptions&) const = default;
};

/// Top-1 accuracy (classification) or PCK at `pck_fraction` of the image
/// diagonal (keypoints), computed in eval mode.
double evaluate(Net<float>& net, const Dataset& data, double pck_fraction = 0.1, std::size_t batch_size = 128);

/// Maps a decoded heatmap cell back to image pixels.
inline double heatmap_to_image(std::size_t cell, std::size_t stride) { return cell_center(cell, stride); }

/// Mini-batch training loop. Sample order comes from the trainer's own
/// seeded generator, so a run is fully determined by (seed, net init, data).
class Trainer {
public:
  Trainer(Net<float>& net, const Dataset& train, const Dataset* eval, OptimConfig optim, TrainOptions options,
          std::uint64_t seed);

  /// One optimizer step on the given samples; returns the batch loss.
  double train_step(std::span<const std::size_t> indices);

  /// Runs the next epoch and evaluates.
  EpochRecord run_epoch();

  /// Runs until options.epochs; `on_epoch` is called after each epoch.
  RunRecord run(const std::function<void(const EpochRecord&)>& on_epoch = {});

  std::size_t epoch() const { return epoch_; }
  std::size_t global_step() const { return step_; }
  Rng& rng() { return rng_; }
  Optimizer& optimizer() { return optim_; }
  const RunRecord& record() const { return record_; }
  RunRecord& record() { return record_; }
  const std::vector<double>& step_losses() const { return step_losses_; }

  /// Restores loop position after loading a checkpoint.
  void resume(std::size_t epoch, std::size_t step) {
    epoch_ = epoch;
    step_ = step;
  }

private:
  Net<float>& net_;
  const Dataset& train_;
  const Dataset* eval_;
  TrainOptions options_;
  Optimizer optim_;
  Rng rng_;
  std::size_t epoch_ = 0;
  std::size_t step_ = 0;
  RunRecord record_;
  std::vector<double> step_losses_;
};

std::size_t steps_per_epoch(std::size_t samples, std::size_t batch_size);

RunRecord train(Net<float>& net, const Dataset& train, const Dataset* eval, const OptimConfig& optim,
                const TrainOptions& options, std::uint64_t seed);

// ---------------------------------------------------------------- ablation

struct AblationVariant {
  std::string name;
  DownsamplerKind kind = DownsamplerKind::strided_conv;
  MgilConfig mgil{};
};

/// Named grids: "components" (baseline, +FLIE, +FLIE+CII, +FLIE+CII+MGAF),
/// "lie_depth" (FLIE depth 1..4), "lie_per_module" (fine/coarse depth pairs),
/// "fusion" (additive vs adaptive), "downsamplers" (all four kinds).
std::vector<AblationVariant> ablation_preset(const std::string& name);
std::vector<std::string> ablation_preset_names();

struct AblationRun {
  AblationVariant variant;
  std::uint64_t seed = 0;
  RunRecord record;
};

struct AblationCell {
  std::string variant;
  std::size_t runs = 0;
  double mean = 0;
  /// Sample standard deviation (n - 1); 0 for a single run.
  double stddev = 0;
};

struct AblationTable {
  std::vector<AblationRun> runs;

  /// One cell per variant, in first-appearance order.
  std::vector<AblationCell> summary() const;
  /// Columns: downsampler, flie_depth, cii_depth, fusion, seed, metric.
  void write_csv(std::ostream& os) const;
  /// Text table with component marks and mean +- std per variant.
  std::string render() const;
};

struct AblationSetup {
  NetSpec net;
  OptimConfig optim;
  TrainOptions options;
  std::uint64_t config_hash = 0;
};

AblationTable ablate(const std::vector<AblationVariant>& grid, const std::vector<std::uint64_t>& seeds,
                     const AblationSetup& setup, const Dataset& train, const Dataset& test,
                     const std::function<void(const AblationRun&)>& on_run = {});

/// RFC 4180 field quoting.
std::string csv_field(const std::string& value);

}  // namespace mgil
