// SPDX-License-Identifier: Apache-2.0
//
// Anchor-based single-shot head over the prediction maps.
//
// Per anchor the head emits 5 + K logits: (tx, ty, tw, th, objectness,
// class_1..class_K). Box encoding relative to the anchor's cell and prior:
//   cx = (col + sigmoid(tx)) * stride      cy = (row + sigmoid(ty)) * stride
//   w  = prior_w * exp(tw)                 h  = prior_h * exp(th)
// Channels of a map are grouped by prior: prior a owns [a*(5+K), (a+1)*(5+K)).
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "prbfpn/blocks.hpp"
#include "prbfpn/box.hpp"

namespace prbfpn {

struct Prior {
  double w = 0;
  double h = 0;
};

struct Anchor {
  int map = 0;    // prediction map index, 0 = coarsest
  int level = 1;  // pyramid level of that map
  int row = 0;
  int col = 0;
  int prior = 0;  // index within the map's priors
  double prior_w = 0;
  double prior_h = 0;
  int stride = 1;

  Box box() const { return Box{(col + 0.5) * stride, (row + 0.5) * stride, prior_w, prior_h}; }
};

struct MapLayout {
  int level = 1;
  int stride = 1;
  int side = 1;
  std::vector<Prior> priors;
  std::size_t offset = 0;  // index of the map's first anchor
};

/// Anchors ordered (map, row, col, prior).
struct AnchorGrid {
  std::vector<MapLayout> maps;
  std::vector<Anchor> anchors;

  std::size_t index(int map, int row, int col, int prior) const {
    const MapLayout& m = maps[static_cast<std::size_t>(map)];
    return m.offset + (static_cast<std::size_t>(row) * m.side + col) * m.priors.size() + prior;
  }
  std::size_t size() const { return anchors.size(); }
};

/// `levels[i]` and `priors[i]` describe prediction map i. Throws ConfigError
/// when the lists differ in length, a prior is not positive, or a level's
/// stride does not divide the image.
AnchorGrid gen_anchors(std::span<const int> levels, int image_side,
                       const std::vector<std::vector<Prior>>& priors);
/// Prediction levels of the model: L, L-1, ..., L-N+1.
AnchorGrid gen_anchors(const PrbFpnConfig& config, int image_side,
                       const std::vector<std::vector<Prior>>& priors);

enum class AnchorRole : std::uint8_t { kNegative, kPositive, kIgnored };

inline constexpr double kIgnoreIou = 0.5;

struct Assignment {
  std::vector<AnchorRole> role;
  std::vector<int> gt_of_anchor;  // gt index for positives, -1 otherwise
  std::vector<int> anchor_of_gt;  // -1 when every candidate was taken

  std::size_t positives() const;
};

/// Each gt (in order) takes the free anchor of highest IoU among the anchors
/// whose cell contains its centre, one per (map, prior); ties go to the lowest
/// anchor index. Other anchors whose box overlaps any gt with IoU > 0.5 are
/// ignored, the rest are negative.
Assignment assign_targets(const AnchorGrid& grid, std::span<const GroundTruthBox> gts);

struct BoxEncoding {
  double tx = 0;  // target of sigmoid(raw tx), in [0, 1)
  double ty = 0;
  double tw = 0;
  double th = 0;
};

BoxEncoding encode_box(const Box& gt, const Anchor& anchor);

struct LossWeights {
  double box = 5.0;
  double obj = 1.0;
  double cls = 1.0;
};

struct LossBreakdown {
  double total = 0;
  double box = 0;
  double obj = 0;
  double cls = 0;
  std::size_t positives = 0;
};

template <typename T>
class DetectionHead {
 public:
  DetectionHead(const PrbFpnConfig& config, int num_classes, int priors_per_level);

  int num_classes() const { return num_classes_; }
  int priors_per_level() const { return priors_per_level_; }
  int channels_per_map() const { return priors_per_level_ * (5 + num_classes_); }
  std::span<Parameter<T>> parameters() { return params_; }
  std::span<const Parameter<T>> parameters() const { return params_; }
  const std::vector<Conv<T>>& convs() const { return convs_; }

 private:
  int num_classes_;
  int priors_per_level_;
  std::vector<Parameter<T>> params_;
  std::vector<Conv<T>> convs_;
};

/// One 1x1 convolution per prediction map. Throws ShapeError on channel mismatch.
template <typename T>
std::vector<Tensor<T>> head_forward(std::span<const FeatureMap<T>> prediction_maps, const DetectionHead<T>& head);

/// Mean over images of
///   box: (1/P) sum_pos smoothL1 over (sigmoid(tx)-tx*, sigmoid(ty)-ty*, tw-tw*, th-th*)
///   obj: (1/P) sum_pos BCE(o, 1) + (1/Ng) sum_neg BCE(o, 0); ignored anchors skipped
///   cls: (1/P) sum_pos sum_k BCE(c_k, [k == class])
/// weighted by `weights` (P, Ng floored at 1). `raw[i]` is the batch output for
/// map i; `assignments` and `gts` hold one entry per image. Throws
/// NumericsError when the result is not finite.
template <typename T>
Tensor<T> compute_loss(std::span<const Tensor<T>> raw, const AnchorGrid& grid,
                       std::span<const Assignment> assignments,
                       std::span<const std::vector<GroundTruthBox>> gts, int num_classes,
                       const LossWeights& weights = {}, LossBreakdown* breakdown = nullptr);

/// Detections for image `image` of the batch with score >= score_thresh,
/// score = sigmoid(obj) * max_k sigmoid(class_k).
template <typename T>
std::vector<Detection> decode(std::span<const Tensor<T>> raw, const AnchorGrid& grid, int num_classes,
                              double score_thresh, int image = 0);

/// Greedy per-class suppression; keeps detections in descending score order,
/// ties broken by input order.
std::vector<Detection> nms(std::span<const Detection> dets, double iou_thresh);

/// k-means (1 - IoU distance) over gt sizes with k = priors_per_level * N,
/// returned per prediction map, coarse first: the largest priors go to the
/// coarsest map.
std::vector<std::vector<Prior>> fit_priors(std::span<const GroundTruthBox> boxes, int priors_per_level, int N);

std::string format_priors(const std::vector<std::vector<Prior>>& priors);
/// Parses "w:h w:h ...;w:h ..." with maps separated by ';'. Throws ConfigError.
std::vector<std::vector<Prior>> parse_priors(const std::string& text);

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace prbfpn
