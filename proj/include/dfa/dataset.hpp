#pragma once

// Dataset ingestion and splitting. Two sources:
//  - a synthetic generator (class-dependent low-frequency spatial patterns
//    plus gaussian pixel noise), the default desk-scale task;
//  - a binary archive of raw labeled images, one record per image:
//    1 label byte followed by H*W*3 pixel bytes, row-major and
//    channel-interleaved (y, x, channel). Pixels map to [-1, 1] via
//    (b/255 - 0.5) / 0.5.
//
// Train/val splitting is a seeded shuffle; augmentation (4-pixel-pad random
// crop, random horizontal flip) applies to training batches only.

#include <string>
#include <vector>

#include "dfa/tensor.hpp"

namespace dfa {

struct SyntheticSpec {
  int classes = 10;
  int image_size = 16;
  int per_class = 100;       // samples per class in the train+val pool
  int test_per_class = 40;
  double noise = 1.0;        // gaussian sigma on top of unit-RMS templates
  uint64_t seed = 7;
};

struct ArchiveSpec {
  std::string train_path;
  std::string test_path;
  int classes = 10;
  int image_size = 32;
};

struct DatasetDescriptor {
  enum class Kind { synthetic, archive };
  Kind kind = Kind::synthetic;
  SyntheticSpec synthetic;
  ArchiveSpec archive;

  // Stable identity string used to refuse cross-protocol run comparisons.
  std::string identity() const;
};

struct Dataset {
  int classes = 0;
  int channels = 3;
  int size = 0;                // square images
  std::vector<float> pixels;   // count * channels * size * size, CHW per image
  std::vector<int> labels;

  int64_t count() const { return static_cast<int64_t>(labels.size()); }
  int64_t image_elems() const { return int64_t(channels) * size * size; }
  const float* image(int64_t i) const { return pixels.data() + i * image_elems(); }
};

struct DataSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

Dataset generate_synthetic(const SyntheticSpec& spec, bool test_set);
Dataset read_archive(const std::string& path, int classes, int image_size);
void write_archive(const std::string& path, const Dataset& ds);  // inverse of read

// Deterministic split of the training pool by seeded shuffle.
DataSplits load_dataset(const DatasetDescriptor& desc, double train_fraction,
                        uint64_t split_seed);

// In-place horizontal flip of one CHW image (an involution).
void flip_horizontal(float* chw, int channels, int size);

struct Batch {
  Tensor x;
  std::vector<int> labels;
};

// Assembles a batch tensor; when aug_rng is non-null, applies random crop
// (4-pixel zero pad) and horizontal flip per sample.
Batch make_batch(const Dataset& ds, std::span<const int64_t> indices, DType dt,
                 Rng* aug_rng);

std::vector<int64_t> shuffled_indices(int64_t n, Rng& rng);

}  // namespace dfa
