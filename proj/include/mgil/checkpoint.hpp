#pragma once

// Binary checkpoint, all integers and floats little-endian:
//
//   "MGILCKPT1"                 9-byte magic
//   u32 version                 currently 1
//   u64 config hash             FNV-1a of the canonical config
//   u64 n, n bytes              canonical config JSON
//   u64 epoch, u64 global step
//   4 x u64                     trainer generator state
//   u64 n, n x (u64 epoch, f64 loss, f64 metric, f64 seconds)    history
//   u64 n, n x (u32 len, name, 4 x u64 dims, f32 data)           named tensors
//   u8 optimizer kind, u64 steps, u64 total steps
//   u64 n, n x (4 x u64 dims, f32 data)                           first moments
//   u64 n, n x (4 x u64 dims, f32 data)                           second moments
//
// Named tensors include batch-norm running statistics, so a restored net
// evaluates and trains exactly like the saved one.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "mgil/config.hpp"
#include "mgil/train.hpp"

namespace mgil {

inline constexpr char kCheckpointMagic[] = "MGILCKPT1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Bad magic, unsupported version, truncation or trailing bytes.
class CheckpointError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct NamedFloatTensor {
  std::string name;
  Tensor<float> tensor;
};

struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::string config_json;
  std::uint64_t epoch = 0;
  std::uint64_t global_step = 0;
  Rng::State rng{};
  std::vector<EpochRecord> history;
  std::vector<NamedFloatTensor> tensors;
  OptimKind optim_kind = OptimKind::sgd_momentum;
  std::uint64_t optim_steps = 0;
  std::uint64_t optim_total_steps = 0;
  std::vector<Tensor<float>> first_moments;
  std::vector<Tensor<float>> second_moments;
};

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes);

/// Writes to a sibling temporary file and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Snapshot of everything needed to continue training bit for bit.
Checkpoint capture_checkpoint(const RunConfig& config, Net<float>& net, Trainer& trainer);

/// Copies tensors into `net` by name; every net tensor must be present with
/// the same shape.
void restore_parameters(const Checkpoint& ckpt, Net<float>& net);

/// restore_parameters plus optimizer, generator, counters and history.
void restore_training(const Checkpoint& ckpt, Net<float>& net, Trainer& trainer);

}  // namespace mgil
