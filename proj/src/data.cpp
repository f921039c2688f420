#include "mgil/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

namespace mgil {

namespace fs = std::filesystem;

std::vector<fs::path> cifar_files(const fs::path& dir, Split split) {
  if (split == Split::test) return {dir / "test_batch.bin"};
  std::vector<fs::path> files;
  for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  return files;
}

fs::path resolve_cifar_dir(const fs::path& dir) {
  const fs::path nested = dir / "cifar-10-batches-bin";
  if (!fs::exists(dir / "test_batch.bin") && fs::exists(nested / "test_batch.bin")) return nested;
  return dir;
}

Dataset load_cifar10(const fs::path& root, Split split, std::size_t limit, std::size_t records_per_file) {
  const fs::path dir = resolve_cifar_dir(root);
  const std::uintmax_t expected = static_cast<std::uintmax_t>(records_per_file) * kCifarRecordBytes;
  Dataset data;
  data.task = Task::classify;
  data.num_classes = 10;
  const std::size_t plane = kCifarImageSide * kCifarImageSide;
  std::vector<unsigned char> record(kCifarRecordBytes);
  for (const auto& file : cifar_files(dir, split)) {
    if (!fs::exists(file)) throw FormatError("cifar: missing file " + file.string());
    const std::uintmax_t actual = fs::file_size(file);
    if (actual != expected) {
      throw FormatError("cifar: " + file.string() + " has wrong length: expected " + std::to_string(expected) +
                        " bytes, got " + std::to_string(actual));
    }
    std::ifstream in(file, std::ios::binary);
    for (std::size_t r = 0; r < records_per_file; ++r) {
      if (limit != 0 && data.samples.size() == limit) return data;
      in.read(reinterpret_cast<char*>(record.data()), static_cast<std::streamsize>(record.size()));
      if (!in) throw FormatError("cifar: short read in " + file.string() + " at record " + std::to_string(r));
      if (record[0] > 9) {
        throw FormatError("cifar: " + file.string() + " record " + std::to_string(r) + " has label byte " +
                          std::to_string(record[0]));
      }
      Sample s;
      s.label = record[0];
      s.image = Tensor<float>(Shape{1, 3, kCifarImageSide, kCifarImageSide});
      for (std::size_t i = 0; i < 3 * plane; ++i) s.image[i] = static_cast<float>(record[1 + i]) / 255.0f;
      data.samples.push_back(std::move(s));
    }
  }
  return data;
}

void write_cifar10_fixture(const fs::path& dir, std::uint64_t seed, std::size_t records_per_file) {
  fs::create_directories(dir);
  Rng rng(seed);
  const std::size_t offset = rng.below(10);
  std::vector<unsigned char> record(kCifarRecordBytes);
  std::size_t index = 0;
  for (Split split : {Split::train, Split::test}) {
    for (const auto& file : cifar_files(dir, split)) {
      std::ofstream out(file, std::ios::binary | std::ios::trunc);
      for (std::size_t r = 0; r < records_per_file; ++r, ++index) {
        record[0] = static_cast<unsigned char>((index + offset) % 10);
        for (std::size_t i = 1; i < record.size(); ++i) record[i] = static_cast<unsigned char>(rng() >> 56);
        out.write(reinterpret_cast<const char*>(record.data()), static_cast<std::streamsize>(record.size()));
      }
      if (!out) throw FormatError("cifar: failed to write " + file.string());
    }
  }
}

Tensor<float> render_heatmap(double cx, double cy, std::size_t h, std::size_t w, double sigma) {
  Tensor<float> t(Shape{1, 1, h, w});
  const double denom = 2.0 * sigma * sigma;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = static_cast<double>(x) - cx;
      const double dy = static_cast<double>(y) - cy;
      t(0, 0, y, x) = static_cast<float>(std::exp(-(dx * dx + dy * dy) / denom));
    }
  }
  return t;
}

Sample lowres_transform(const Sample& sample, std::size_t factor, double sigma) {
  const Shape& s = sample.image.shape();
  require(factor >= 1, "lowres_transform: factor must be positive");
  if (s.h % factor != 0 || s.w % factor != 0) {
    throw ContractViolation("lowres_transform: image " + s.str() + " is not divisible by factor " +
                            std::to_string(factor));
  }
  if (factor == 1) return sample;
  Sample out = sample;
  const std::size_t h = s.h / factor, w = s.w / factor;
  out.image = Tensor<float>(Shape{s.n, s.c, h, w});
  const double area = static_cast<double>(factor * factor);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          double acc = 0;
          for (std::size_t dy = 0; dy < factor; ++dy)
            for (std::size_t dx = 0; dx < factor; ++dx) acc += sample.image(n, c, y * factor + dy, x * factor + dx);
          out.image(n, c, y, x) = static_cast<float>(acc / area);
        }
  if (!sample.heatmap.empty()) {
    // Keep the output stride, so the heatmap shrinks by the same factor.
    const std::size_t stride = s.h / sample.heatmap.shape().h;
    require(h % stride == 0 && w % stride == 0,
            "lowres_transform: reduced image is not divisible by the heatmap stride " + std::to_string(stride));
    out.kx = sample.kx / static_cast<float>(factor);
    out.ky = sample.ky / static_cast<float>(factor);
    const double centre = (static_cast<double>(stride) - 1.0) / 2.0;
    out.heatmap = render_heatmap((out.kx - centre) / static_cast<double>(stride),
                                 (out.ky - centre) / static_cast<double>(stride), h / stride, w / stride, sigma);
  }
  return out;
}

Dataset lowres_transform(const Dataset& data, std::size_t factor) {
  Dataset out;
  out.task = data.task;
  out.num_classes = data.num_classes;
  out.samples.reserve(data.size());
  for (const auto& s : data.samples) out.samples.push_back(lowres_transform(s, factor));
  return out;
}

Dataset synth_keypoint_dataset(std::size_t n, std::size_t size, std::uint64_t seed, std::size_t stride, double sigma) {
  require(size >= 2 && size % 2 == 0, "synth_keypoint_dataset: size must be even");
  require(stride >= 1 && size % stride == 0, "synth_keypoint_dataset: size must be divisible by the stride");
  Rng rng(seed);
  Dataset data;
  data.task = Task::keypoint;
  data.num_classes = 0;
  const std::size_t cells = size / stride;
  const double blob = 1.5;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    const std::size_t cx = rng.below(cells), cy = rng.below(cells);
    s.kx = static_cast<float>(cell_center(cx, stride));
    s.ky = static_cast<float>(cell_center(cy, stride));
    s.image = Tensor<float>(Shape{1, 3, size, size});
    // Texture: a random low-frequency wave per channel plus per-pixel noise.
    for (std::size_t c = 0; c < 3; ++c) {
      const double fx = rng.uniform(0.1, 0.6), fy = rng.uniform(0.1, 0.6), phase = rng.uniform(0.0, 6.283);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double wave = 0.15 * std::sin(fx * static_cast<double>(x) + fy * static_cast<double>(y) + phase);
          s.image(0, c, y, x) = static_cast<float>(0.3 + wave + rng.uniform(-0.15, 0.15));
        }
    }
    const double amplitude = rng.uniform(0.5, 0.7);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double dx = static_cast<double>(x) - s.kx, dy = static_cast<double>(y) - s.ky;
          const double v = s.image(0, c, y, x) + amplitude * std::exp(-(dx * dx + dy * dy) / (2 * blob * blob));
          s.image(0, c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    s.heatmap = render_heatmap(static_cast<double>(cx), static_cast<double>(cy), cells, cells, sigma);
    data.samples.push_back(std::move(s));
  }
  return data;
}

Dataset synth_classification_dataset(std::size_t n, std::size_t size, std::size_t num_classes, std::uint64_t seed) {
  require(num_classes >= 2, "synth_classification_dataset: need at least two classes");
  Rng rng(seed);
  Dataset data;
  data.task = Task::classify;
  data.num_classes = num_classes;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.label = static_cast<int>(i % num_classes);
    const double k = static_cast<double>(s.label);
    const double angle = std::numbers::pi * k / static_cast<double>(num_classes);
    const double freq = 0.5 + 0.15 * static_cast<double>(s.label % 3);
    const double phase = rng.uniform(0.0, 2 * std::numbers::pi);
    const double ca = std::cos(angle), sa = std::sin(angle);
    s.image = Tensor<float>(Shape{1, 3, size, size});
    for (std::size_t c = 0; c < 3; ++c) {
      const double tint = 0.35 + 0.3 * std::cos(k * 2.1 + static_cast<double>(c) * 2.0);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double u = ca * static_cast<double>(x) + sa * static_cast<double>(y);
          const double v = tint + 0.25 * std::sin(freq * u + phase) + rng.uniform(-0.2, 0.2);
          s.image(0, c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    data.samples.push_back(std::move(s));
  }
  // Interleaved labels are a fixed order; shuffle so prefixes stay balanced
  // but not periodic.
  for (std::size_t i = data.samples.size(); i > 1; --i) std::swap(data.samples[i - 1], data.samples[rng.below(i)]);
  return data;
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices, const std::vector<bool>& flip) {
  require(!indices.empty(), "make_batch: empty index list");
  require(flip.empty() || flip.size() == indices.size(), "make_batch: flip flags must match indices");
  const Shape first = data.samples.at(indices[0]).image.shape();
  Batch b;
  b.images = Tensor<float>(Shape{indices.size(), first.c, first.h, first.w});
  const std::size_t per_image = first.c * first.plane();
  const bool keypoint = data.task == Task::keypoint;
  if (keypoint) {
    const Shape hm = data.samples[indices[0]].heatmap.shape();
    b.heatmaps = Tensor<float>(Shape{indices.size(), hm.c, hm.h, hm.w});
  }
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Sample& s = data.samples.at(indices[i]);
    require(s.image.shape() == first, "make_batch: image " + s.image.shape().str() + " differs from " + first.str());
    float* dst = b.images.data().data() + i * per_image;
    if (!flip.empty() && flip[i]) {
      require(!keypoint, "make_batch: flipping is only defined for classification");
      for (std::size_t c = 0; c < first.c; ++c)
        for (std::size_t y = 0; y < first.h; ++y)
          for (std::size_t x = 0; x < first.w; ++x)
            dst[(c * first.h + y) * first.w + x] = s.image(0, c, y, first.w - 1 - x);
    } else {
      std::copy(s.image.data().begin(), s.image.data().end(), dst);
    }
    if (keypoint) {
      const std::size_t hm = s.heatmap.size();
      std::copy(s.heatmap.data().begin(), s.heatmap.data().end(), b.heatmaps.data().data() + i * hm);
    } else {
      b.labels.push_back(s.label);
    }
  }
  return b;
}

}  // namespace mgil
