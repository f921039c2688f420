#pragma once

// Command implementations behind the `mgil` executable. Each returns the
// process exit code and writes human-readable output to `out`, diagnostics
// to `err`.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mgil/data.hpp"
#include "mgil/gradcheck.hpp"

namespace mgil {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitNonFinite = 3,
  kExitCheckpoint = 4,
  kExitGradcheck = 5,
};

struct TrainCommand {
  std::filesystem::path config;
  /// Continue from this checkpoint; its config hash must match.
  std::optional<std::filesystem::path> resume;
  /// Overrides the config's output_dir.
  std::optional<std::filesystem::path> output_dir;
};

/// Output directory layout:
///   config.json                 canonical config
///   metrics.csv                 epoch,train_loss,eval_metric,seconds
///   checkpoints/epoch_NNNN.ckpt one per epoch (epoch_0000 holds the init weights)
///   last.ckpt                   copy of the newest checkpoint
int cmd_train(const TrainCommand& command, std::ostream& out, std::ostream& err);

/// `data` is a CIFAR-10 directory or the token "synthetic".
int cmd_eval(const std::filesystem::path& checkpoint, const std::string& data, std::ostream& out, std::ostream& err);

int cmd_gradcheck(std::ostream& out, std::ostream& err,
                  const std::vector<GradcheckCase>& cases = default_gradcheck_cases());

/// Writes ablation.csv and ablation.txt into the output directory.
int cmd_ablate(const std::filesystem::path& config, const std::optional<std::filesystem::path>& output_dir,
               std::ostream& out, std::ostream& err);

/// Name of the metric reported for a task: "top1" or "pck".
const char* metric_name(Task task);

}  // namespace mgil
