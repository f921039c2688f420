#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mgil/random.hpp"
#include "mgil/tensor.hpp"

namespace mgil {

enum class Task { classify, keypoint };

/// One image plus its label. Images are (1, 3, H, W) with values in [0, 1].
struct Sample {
  Tensor<float> image;
  int label = -1;
  /// Keypoint in image pixel coordinates (keypoint task only).
  float kx = 0;
  float ky = 0;
  /// Target heatmap (1, 1, H / stride, W / stride) (keypoint task only).
  Tensor<float> heatmap;
};

struct Dataset {
  Task task = Task::classify;
  std::size_t num_classes = 10;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

// ---------------------------------------------------------------- CIFAR-10

inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr std::size_t kCifarRecordsPerFile = 10000;
inline constexpr std::size_t kCifarImageSide = 32;

enum class Split { train, test };

/// Raised for missing files and wrong file lengths.
class FormatError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// data_batch_1..5.bin for train, test_batch.bin for test.
std::vector<std::filesystem::path> cifar_files(const std::filesystem::path& dir, Split split);

/// Accepts either the directory holding the .bin files or its parent when it
/// contains the usual "cifar-10-batches-bin" folder.
std::filesystem::path resolve_cifar_dir(const std::filesystem::path& dir);

/// Reads the binary batches. Every file must be exactly
/// records_per_file * 3073 bytes. `limit` > 0 stops after that many records.
Dataset load_cifar10(const std::filesystem::path& dir, Split split, std::size_t limit = 0,
                     std::size_t records_per_file = kCifarRecordsPerFile);

/// Writes a deterministic file set in the standard binary layout: one label
/// byte then 3072 CHW pixel bytes per record. Labels cycle 0..9 with a
/// seeded offset, pixels are seeded bytes.
void write_cifar10_fixture(const std::filesystem::path& dir, std::uint64_t seed,
                           std::size_t records_per_file = kCifarRecordsPerFile);

// ---------------------------------------------------------------- transforms

/// Average-pools the image by `factor`; keypoints are divided by `factor` and
/// the heatmap is re-rendered at the same output stride.
Sample lowres_transform(const Sample& sample, std::size_t factor, double sigma = 1.5);

Dataset lowres_transform(const Dataset& data, std::size_t factor);

/// Gaussian of width `sigma` centered at (cx, cy) on an h x w grid, peak 1.
Tensor<float> render_heatmap(double cx, double cy, std::size_t h, std::size_t w, double sigma);

/// Image-space coordinate of the center of heatmap cell `cell` at `stride`.
inline double cell_center(std::size_t cell, std::size_t stride) {
  return static_cast<double>(cell * stride) + (static_cast<double>(stride) - 1.0) / 2.0;
}

// ---------------------------------------------------------------- synthetic data

/// Images of side `size` with one bright blob on textured noise. The
/// keypoint sits at the center of a heatmap cell, and the target is a
/// Gaussian (sigma in heatmap cells) peaking at that cell.
Dataset synth_keypoint_dataset(std::size_t n, std::size_t size, std::uint64_t seed, std::size_t stride = 4,
                               double sigma = 1.5);

/// Class-conditional oriented gratings with a class tint plus noise; a
/// stand-in for natural images when no dataset files are available.
Dataset synth_classification_dataset(std::size_t n, std::size_t size, std::size_t num_classes, std::uint64_t seed);

// ---------------------------------------------------------------- batching

struct Batch {
  Tensor<float> images;
  std::vector<int> labels;
  Tensor<float> heatmaps;
};

/// Stacks the selected samples. `flip` (optional, one flag per index) mirrors
/// images left-right; only valid for classification.
Batch make_batch(const Dataset& data, std::span<const std::size_t> indices, const std::vector<bool>& flip = {});

}  // namespace mgil
