#pragma once

// Run configuration: one JSON document with nested sections.
//
//   {
//     "task": "classify" | "keypoint",
//     "seed": 42, "epochs": 30, "output_dir": "runs/demo",
//     "net":         { "base_width", "num_stages", "blocks_per_stage", "widen", "normalization",
//                      "num_classes", "num_keypoints", "decoder_layers", "in_channels" },
//     "downsampler": { "kind": "strided_conv" | "max_pool" | "spd_conv" | "mgil" },
//     "mgil":        { "lie_depth_flie", "lie_depth_cii", "dilation_rates", "fusion", "cii_enabled",
//                      "cii_input", "eca_gamma", "eca_b" },
//     "optim":       { "kind", "lr", "momentum", "beta1", "beta2", "eps", "weight_decay", "cosine" },
//     "train":       { "batch_size", "flip", "pck_fraction" },
//     "data":        { "source": "cifar10" | "synthetic", "path", "lowres_factor", "train_samples",
//                      "test_samples", "image_size", "seed" },
//     "ablation":    { "preset", "seeds" }
//   }
//
// Every key is optional and falls back to its default. Unknown keys and
// wrongly typed values are errors that name the offending key path.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "mgil/data.hpp"
#include "mgil/nets.hpp"
#include "mgil/optim.hpp"
#include "mgil/train.hpp"

namespace mgil {

class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class DataSource { cifar10, synthetic };

struct DataConfig {
  DataSource source = DataSource::synthetic;
  std::string path;
  std::size_t lowres_factor = 1;
  std::size_t train_samples = 5000;
  std::size_t test_samples = 2000;
  /// Side length of generated images (synthetic source only).
  std::size_t image_size = 32;
  std::uint64_t seed = 7;

  bool operator==(const DataConfig&) const = default;
};

struct AblationConfig {
  std::string preset = "components";
  std::vector<std::uint64_t> seeds{1, 2, 3};

  bool operator==(const AblationConfig&) const = default;
};

struct RunConfig {
  Task task = Task::classify;
  std::uint64_t seed = 42;
  std::size_t epochs = 30;
  std::string output_dir = "runs/default";
  /// `head` follows `task`; mgil channel fields are filled in per stage.
  NetSpec net{};
  OptimConfig optim{};
  TrainOptions train{};
  DataConfig data{};
  AblationConfig ablation{};

  /// Net spec with the head matching the task.
  NetSpec net_spec() const;
  TrainOptions train_options() const;

  bool operator==(const RunConfig&) const = default;
};

RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::filesystem::path& path);

/// Canonical serialization: every field, keys sorted, two-space indent.
std::string dump_config(const RunConfig& config);

/// 64-bit FNV-1a of the canonical serialization.
std::uint64_t config_hash(const RunConfig& config);
std::uint64_t fnv1a64(std::string_view bytes);

/// Train and test sets described by the data section.
struct DataSplits {
  Dataset train;
  Dataset test;
};
DataSplits load_data(const RunConfig& config);

/// Test set only. `source` overrides the configured one: a directory path
/// reads CIFAR-10 from there, "synthetic" regenerates the configured set.
Dataset load_test_data(const RunConfig& config, const std::string& source);

const char* to_string(Task task);
const char* to_string(DataSource source);

}  // namespace mgil
