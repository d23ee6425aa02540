// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multi-scale detection scenes: disks, squares and triangles on a
// noisy gradient background. Every sample is a pure function of the scene
// config and its index.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prbfpn/box.hpp"
#include "prbfpn/tensor.hpp"

namespace prbfpn {

enum class ShapeKind : int { kDisk = 0, kSquare = 1, kTriangle = 2 };

inline constexpr int kMaxClasses = 3;

struct SizeBucket {
  int lo = 0;  // inclusive side lengths in pixels
  int hi = 0;
};

struct SceneConfig {
  int image_side = 128;
  int num_classes = 3;
  int objects_min = 1;
  int objects_max = 6;
  // tiny, small, medium, large
  std::array<SizeBucket, 4> buckets{{{4, 7}, {8, 12}, {13, 32}, {33, 64}}};
  std::array<double, 4> weights{0.25, 0.25, 0.25, 0.25};
  double noise_std = 0.03;
  std::uint64_t seed = 7;

  /// Throws ConfigError.
  void validate() const;
  /// Boundaries between adjacent buckets, at the midpoint of the gap.
  std::array<double, 3> bucket_cutoffs() const;
};

struct Sample {
  Tensor<float> image;  // 1 x 3 x side x side, values in [0, 1]
  std::vector<GroundTruthBox> boxes;
};

/// Object layout of one sample without rendering it.
std::vector<GroundTruthBox> generate_boxes(const SceneConfig& config, std::uint64_t split_seed, int index);
Sample generate_sample(const SceneConfig& config, std::uint64_t split_seed, int index);
/// Shorthand using config.seed as the split seed.
Sample generate_sample(const SceneConfig& config, int index);

/// Rasterised object mask (side x side, row-major) of one shape.
std::vector<std::uint8_t> shape_mask(ShapeKind kind, const Box& box, int side);

enum class Split : std::uint64_t { kTrain = 1, kVal = 2 };

std::uint64_t split_seed(std::uint64_t base_seed, Split split);

/// Index-addressable split. Samples are generated on demand, or read from
/// `cache_dir` when one is set (and written there on first use).
class Dataset {
 public:
  Dataset(SceneConfig config, Split split, int count, std::optional<std::filesystem::path> cache_dir = {});

  int size() const { return count_; }
  std::uint64_t seed() const { return seed_; }
  const SceneConfig& config() const { return config_; }
  Sample get(int index) const;
  std::vector<GroundTruthBox> boxes(int index) const;
  /// Samples for `indices`, generated by up to `workers` threads. The result
  /// does not depend on the worker count.
  std::vector<Sample> get_many(std::span<const int> indices, int workers = 1) const;

 private:
  SceneConfig config_;
  std::uint64_t seed_;
  int count_;
  std::optional<std::filesystem::path> cache_dir_;
};

/// Per-epoch shuffle: a permutation of 0..count-1 keyed on (seed, epoch).
std::vector<int> epoch_order(int count, std::uint64_t seed, int epoch);

/// Stacks sample images into one n x 3 x side x side batch.
Tensor<float> stack_images(std::span<const Sample> samples);

/// Size bucket (0..3) of a side length, by the bucket cutoffs.
int size_bucket(const SceneConfig& config, double side);

}  // namespace prbfpn
