// SPDX-License-Identifier: Apache-2.0
//
// COCO-style detection metrics: greedy score-ordered matching, 101-point
// interpolated AP averaged over classes and IoU thresholds 0.50:0.05:0.95,
// and size-restricted AP where gts outside the size range (and detections
// matched to them, or unmatched detections outside the range) are ignored.
#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prbfpn/box.hpp"

namespace prbfpn {

using ImageDetections = std::vector<Detection>;
using ImageTruth = std::vector<GroundTruthBox>;

/// Range of sqrt(area) in pixels, [lo, hi).
struct SizeRange {
  double lo = 0;
  double hi = std::numeric_limits<double>::infinity();

  bool contains(const Box& b) const {
    const double s = std::sqrt(b.area());
    return s >= lo && s < hi;
  }
};

struct EvalConfig {
  int num_classes = 3;
  double small_max = 12.5;   // sqrt(area) cutoff between ap_s and ap_m
  double medium_max = 32.5;  // between ap_m and ap_l
  int max_dets = 100;        // per image and class, highest scores kept
};

struct MatchResult {
  std::vector<double> scores;  // descending
  std::vector<bool> tp;        // parallel to scores
  std::size_t gt_count = 0;
};

/// Detections of `class_id` across all images, sorted by descending score
/// (stable: image order, then input order). Each one claims the unclaimed gt
/// of its image and class with the highest IoU >= iou_thresh, ties to the
/// lower gt index; unmatched ones are false positives.
MatchResult match_and_score(std::span<const ImageDetections> dets, std::span<const ImageTruth> gts,
                            double iou_thresh, int class_id, const SizeRange& range = {},
                            int max_dets = std::numeric_limits<int>::max());

/// 101-point interpolated AP over a score-sorted TP/FP sequence. Empty when
/// there is neither a gt nor a detection (the class does not count).
std::optional<double> average_precision(const std::vector<bool>& tp, std::size_t gt_count);

/// Precision envelope sampled at recalls 0.00:0.01:1.00 (0 where unreached).
std::array<double, 101> interpolated_precision(const std::vector<bool>& tp, std::size_t gt_count);

inline constexpr std::array<double, 10> kIouThresholds{0.50, 0.55, 0.60, 0.65, 0.70,
                                                       0.75, 0.80, 0.85, 0.90, 0.95};

struct EvalResult {
  double ap = 0;
  double ap50 = 0;
  double ap75 = 0;
  double ap_s = 0;
  double ap_m = 0;
  double ap_l = 0;
  // Class-averaged precision at each recall sample, one row per IoU threshold.
  std::array<std::array<double, 101>, kIouThresholds.size()> pr{};
};

EvalResult evaluate(std::span<const ImageDetections> dets, std::span<const ImageTruth> gts,
                    const EvalConfig& config);

// Tab-separated text, one box per line: image_id, class_id, cx, cy, w, h[, score].
void write_detections(const std::filesystem::path& path, std::span<const ImageDetections> dets);
std::vector<ImageDetections> read_detections(const std::filesystem::path& path, int image_count);
void write_ground_truth(const std::filesystem::path& path, std::span<const ImageTruth> gts);
std::vector<ImageTruth> read_ground_truth(const std::filesystem::path& path, int image_count);

/// key=value metrics followed by a "pr" table (iou, recall, precision).
std::string format_report(const EvalResult& result, const EvalConfig& config, std::size_t images);
void write_report(const std::filesystem::path& path, const EvalResult& result, const EvalConfig& config,
                  std::size_t images);

}  // namespace prbfpn
