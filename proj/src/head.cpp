// SPDX-License-Identifier: Apache-2.0
#include "prbfpn/head.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "prbfpn/ops.hpp"

namespace prbfpn {

AnchorGrid gen_anchors(std::span<const int> levels, int image_side,
                       const std::vector<std::vector<Prior>>& priors) {
  if (levels.size() != priors.size()) {
    throw ConfigError("gen_anchors: " + std::to_string(priors.size()) + " prior lists for " +
                      std::to_string(levels.size()) + " prediction maps");
  }
  AnchorGrid grid;
  for (std::size_t m = 0; m < levels.size(); ++m) {
    MapLayout layout;
    layout.level = levels[m];
    layout.stride = 1 << (levels[m] - 1);
    if (image_side % layout.stride != 0) {
      throw ConfigError("gen_anchors: stride " + std::to_string(layout.stride) + " does not divide image side " +
                        std::to_string(image_side));
    }
    layout.side = image_side / layout.stride;
    layout.priors = priors[m];
    if (layout.priors.empty()) throw ConfigError("gen_anchors: map " + std::to_string(m) + " has no priors");
    for (const auto& p : layout.priors) {
      if (!(p.w > 0 && p.h > 0)) throw ConfigError("gen_anchors: prior dimensions must be positive");
    }
    layout.offset = grid.anchors.size();
    for (int r = 0; r < layout.side; ++r)
      for (int c = 0; c < layout.side; ++c)
        for (std::size_t a = 0; a < layout.priors.size(); ++a) {
          grid.anchors.push_back(Anchor{static_cast<int>(m), layout.level, r, c, static_cast<int>(a),
                                        layout.priors[a].w, layout.priors[a].h, layout.stride});
        }
    grid.maps.push_back(std::move(layout));
  }
  return grid;
}

AnchorGrid gen_anchors(const PrbFpnConfig& config, int image_side,
                       const std::vector<std::vector<Prior>>& priors) {
  std::vector<int> levels;
  for (int s = 1; s <= config.N; ++s) levels.push_back(prediction_level(s, config.L));
  return gen_anchors(levels, image_side, priors);
}

std::size_t Assignment::positives() const {
  return static_cast<std::size_t>(std::count(role.begin(), role.end(), AnchorRole::kPositive));
}

Assignment assign_targets(const AnchorGrid& grid, std::span<const GroundTruthBox> gts) {
  Assignment a;
  a.role.assign(grid.size(), AnchorRole::kNegative);
  a.gt_of_anchor.assign(grid.size(), -1);
  a.anchor_of_gt.assign(gts.size(), -1);
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const Box& gb = gts[g].box;
    double best_iou = -1;
    std::size_t best = 0;
    bool found = false;
    for (std::size_t m = 0; m < grid.maps.size(); ++m) {
      const MapLayout& layout = grid.maps[m];
      const int col = std::clamp(static_cast<int>(std::floor(gb.cx / layout.stride)), 0, layout.side - 1);
      const int row = std::clamp(static_cast<int>(std::floor(gb.cy / layout.stride)), 0, layout.side - 1);
      for (std::size_t p = 0; p < layout.priors.size(); ++p) {
        const std::size_t idx = grid.index(static_cast<int>(m), row, col, static_cast<int>(p));
        if (a.role[idx] == AnchorRole::kPositive) continue;
        const double v = iou(gb, grid.anchors[idx].box());
        // Candidates are visited in index order, so strict > keeps the lowest index on ties.
        if (v > best_iou) {
          best_iou = v;
          best = idx;
          found = true;
        }
      }
    }
    if (found) {
      a.role[best] = AnchorRole::kPositive;
      a.gt_of_anchor[best] = static_cast<int>(g);
      a.anchor_of_gt[g] = static_cast<int>(best);
    }
  }
  if (!gts.empty()) {
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (a.role[i] == AnchorRole::kPositive) continue;
      const Box ab = grid.anchors[i].box();
      for (const auto& gt : gts) {
        if (iou(ab, gt.box) > kIgnoreIou) {
          a.role[i] = AnchorRole::kIgnored;
          break;
        }
      }
    }
  }
  return a;
}

BoxEncoding encode_box(const Box& gt, const Anchor& anchor) {
  return BoxEncoding{gt.cx / anchor.stride - anchor.col, gt.cy / anchor.stride - anchor.row,
                     std::log(gt.w / anchor.prior_w), std::log(gt.h / anchor.prior_h)};
}

template <typename T>
DetectionHead<T>::DetectionHead(const PrbFpnConfig& config, int num_classes, int priors_per_level)
    : num_classes_(num_classes), priors_per_level_(priors_per_level) {
  if (num_classes < 1) throw ConfigError("head: num_classes must be >= 1");
  if (priors_per_level < 1) throw ConfigError("head: priors_per_level must be >= 1");
  for (int s = 1; s <= config.N; ++s) {
    convs_.push_back(make_conv<T>(params_, "head.s" + std::to_string(s), channels_per_map(), config.c_head, 1, 1,
                                  0, config.seed));
  }
}

template <typename T>
std::vector<Tensor<T>> head_forward(std::span<const FeatureMap<T>> prediction_maps, const DetectionHead<T>& head) {
  const auto& convs = head.convs();
  if (prediction_maps.size() != convs.size()) {
    throw ShapeError("head_forward: head has " + std::to_string(convs.size()) + " maps, got " +
                     std::to_string(prediction_maps.size()));
  }
  std::vector<Tensor<T>> raw;
  raw.reserve(convs.size());
  for (std::size_t i = 0; i < convs.size(); ++i) raw.push_back(pointwise_conv(prediction_maps[i].tensor, convs[i].weight, convs[i].bias));
  return raw;
}

namespace {

double bce_logits(double x, double y) {
  return std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
}

double smooth_l1(double d) {
  const double a = std::abs(d);
  return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

double smooth_l1_grad(double d) {
  if (d >= 1.0) return 1.0;
  if (d <= -1.0) return -1.0;
  return d;
}

template <typename T>
void check_raw(std::span<const Tensor<T>> raw, const AnchorGrid& grid, int num_classes) {
  if (raw.size() != grid.maps.size()) {
    throw ShapeError("head output has " + std::to_string(raw.size()) + " maps, anchor grid has " +
                     std::to_string(grid.maps.size()));
  }
  for (std::size_t m = 0; m < raw.size(); ++m) {
    const Shape s = raw[m].shape();
    const auto& layout = grid.maps[m];
    const int want_c = static_cast<int>(layout.priors.size()) * (5 + num_classes);
    if (s.c != want_c || s.h != layout.side || s.w != layout.side || s.n != raw[0].shape().n) {
      throw ShapeError("head output map " + std::to_string(m) + " has shape " + s.str() + ", expected Bx" +
                       std::to_string(want_c) + "x" + std::to_string(layout.side) + "x" +
                       std::to_string(layout.side));
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> compute_loss(std::span<const Tensor<T>> raw, const AnchorGrid& grid,
                       std::span<const Assignment> assignments,
                       std::span<const std::vector<GroundTruthBox>> gts, int num_classes,
                       const LossWeights& weights, LossBreakdown* breakdown) {
  check_raw(raw, grid, num_classes);
  const int batch = raw[0].shape().n;
  if (assignments.size() != static_cast<std::size_t>(batch) || gts.size() != static_cast<std::size_t>(batch)) {
    throw ContractError("compute_loss: need one assignment and one gt list per image");
  }
  const int per = 5 + num_classes;
  Tape<T>* tape = active_tape<T>();
  bool any = false;
  for (const auto& r : raw) any = any || r.requires_grad();
  const bool want_grad = tape != nullptr && any;

  // d loss / d raw, filled alongside the forward pass.
  std::vector<std::vector<T>> draw;
  if (want_grad) {
    for (const auto& r : raw) draw.emplace_back(r.numel(), T(0));
  }

  LossBreakdown total;
  for (int b = 0; b < batch; ++b) {
    const Assignment& asg = assignments[static_cast<std::size_t>(b)];
    const auto& img_gts = gts[static_cast<std::size_t>(b)];
    if (asg.role.size() != grid.size()) throw ContractError("compute_loss: assignment does not match anchor grid");
    std::size_t n_pos = 0;
    std::size_t n_neg = 0;
    for (AnchorRole r : asg.role) {
      n_pos += r == AnchorRole::kPositive;
      n_neg += r == AnchorRole::kNegative;
    }
    const double inv_pos = 1.0 / static_cast<double>(std::max<std::size_t>(n_pos, 1));
    const double inv_neg = 1.0 / static_cast<double>(std::max<std::size_t>(n_neg, 1));
    const double inv_batch = 1.0 / batch;
    double box = 0, obj = 0, cls = 0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const AnchorRole role = asg.role[i];
      if (role == AnchorRole::kIgnored) continue;
      const Anchor& an = grid.anchors[i];
      const Tensor<T>& r = raw[static_cast<std::size_t>(an.map)];
      const int base = an.prior * per;
      auto at = [&](int j) { return r.offset(b, base + j, an.row, an.col); };
      const auto x = r.data();
      const double o = x[at(4)];
      if (role == AnchorRole::kNegative) {
        obj += inv_neg * bce_logits(o, 0.0);
        if (want_grad) draw[an.map][at(4)] += static_cast<T>(weights.obj * inv_neg * inv_batch * sigmoid(o));
        continue;
      }
      obj += inv_pos * bce_logits(o, 1.0);
      if (want_grad) draw[an.map][at(4)] += static_cast<T>(weights.obj * inv_pos * inv_batch * (sigmoid(o) - 1.0));

      const GroundTruthBox& gt = img_gts[static_cast<std::size_t>(asg.gt_of_anchor[i])];
      const BoxEncoding enc = encode_box(gt.box, an);
      const double sx = sigmoid(x[at(0)]);
      const double sy = sigmoid(x[at(1)]);
      const double d[4] = {sx - enc.tx, sy - enc.ty, x[at(2)] - enc.tw, x[at(3)] - enc.th};
      const double dd[4] = {sx * (1 - sx), sy * (1 - sy), 1.0, 1.0};
      for (int j = 0; j < 4; ++j) {
        box += inv_pos * smooth_l1(d[j]);
        if (want_grad) draw[an.map][at(j)] += static_cast<T>(weights.box * inv_pos * inv_batch * smooth_l1_grad(d[j]) * dd[j]);
      }
      for (int k = 0; k < num_classes; ++k) {
        const double y = k == gt.class_id ? 1.0 : 0.0;
        const double c = x[at(5 + k)];
        cls += inv_pos * bce_logits(c, y);
        if (want_grad) draw[an.map][at(5 + k)] += static_cast<T>(weights.cls * inv_pos * inv_batch * (sigmoid(c) - y));
      }
    }
    total.box += box * inv_batch;
    total.obj += obj * inv_batch;
    total.cls += cls * inv_batch;
    total.positives += n_pos;
  }
  total.total = weights.box * total.box + weights.obj * total.obj + weights.cls * total.cls;
  if (!std::isfinite(total.total)) {
    std::ostringstream os;
    os << "non-finite detection loss (box=" << total.box << " obj=" << total.obj << " cls=" << total.cls << ")";
    throw NumericsError(os.str());
  }
  if (breakdown) *breakdown = total;

  Tensor<T> out(Shape{}, static_cast<T>(total.total));
  if (want_grad) {
    out.set_requires_grad(true);
    std::vector<Tensor<T>> ins(raw.begin(), raw.end());
    tape->record("detection_loss", ins, out, [ins, out, draw = std::move(draw)]() mutable {
      const T g = out.grad()[0];
      for (std::size_t m = 0; m < ins.size(); ++m) {
        if (!ins[m].requires_grad()) continue;
        auto dst = ins[m].grad_mut();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g * draw[m][i];
      }
    });
  }
  return out;
}

template <typename T>
std::vector<Detection> decode(std::span<const Tensor<T>> raw, const AnchorGrid& grid, int num_classes,
                              double score_thresh, int image) {
  check_raw(raw, grid, num_classes);
  const int per = 5 + num_classes;
  std::vector<Detection> dets;
  for (const Anchor& an : grid.anchors) {
    const Tensor<T>& r = raw[static_cast<std::size_t>(an.map)];
    const int base = an.prior * per;
    auto v = [&](int j) { return static_cast<double>(r.data()[r.offset(image, base + j, an.row, an.col)]); };
    const double objectness = sigmoid(v(4));
    if (objectness < score_thresh) continue;
    int best_k = 0;
    double best_p = -1;
    for (int k = 0; k < num_classes; ++k) {
      const double p = sigmoid(v(5 + k));
      if (p > best_p) {
        best_p = p;
        best_k = k;
      }
    }
    const double score = objectness * best_p;
    if (score < score_thresh) continue;
    Box b;
    b.cx = (an.col + sigmoid(v(0))) * an.stride;
    b.cy = (an.row + sigmoid(v(1))) * an.stride;
    b.w = an.prior_w * std::exp(std::clamp(v(2), -10.0, 10.0));
    b.h = an.prior_h * std::exp(std::clamp(v(3), -10.0, 10.0));
    dets.push_back(Detection{b, objectness, best_k, score});
  }
  return dets;
}

std::vector<Detection> nms(std::span<const Detection> dets, double iou_thresh) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<Detection> kept;
  for (std::size_t idx : order) {
    const Detection& d = dets[idx];
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (k.class_id == d.class_id && iou(k.box, d.box) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

namespace {

double shape_iou(const Prior& a, const Prior& b) {
  const double inter = std::min(a.w, b.w) * std::min(a.h, b.h);
  return inter / (a.w * a.h + b.w * b.h - inter);
}

}  // namespace

std::vector<std::vector<Prior>> fit_priors(std::span<const GroundTruthBox> boxes, int priors_per_level, int N) {
  const std::size_t k = static_cast<std::size_t>(priors_per_level) * static_cast<std::size_t>(N);
  if (k == 0) throw ConfigError("fit_priors: need at least one prior");
  if (boxes.empty()) throw ConfigError("fit_priors: no ground-truth boxes to cluster");
  std::vector<Prior> pts;
  pts.reserve(boxes.size());
  for (const auto& b : boxes) pts.push_back(Prior{b.box.w, b.box.h});
  std::vector<Prior> sorted = pts;
  std::stable_sort(sorted.begin(), sorted.end(), [](const Prior& a, const Prior& b) { return a.w * a.h < b.w * b.h; });
  std::vector<Prior> centroids(k);
  for (std::size_t j = 0; j < k; ++j) {
    const auto q = static_cast<std::size_t>((static_cast<double>(j) + 0.5) / static_cast<double>(k) * sorted.size());
    centroids[j] = sorted[std::min(q, sorted.size() - 1)];
  }
  std::vector<std::size_t> label(pts.size(), 0);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      std::size_t best = 0;
      double best_v = -1;
      for (std::size_t j = 0; j < k; ++j) {
        const double v = shape_iou(pts[i], centroids[j]);
        if (v > best_v) {
          best_v = v;
          best = j;
        }
      }
      if (label[i] != best || iter == 0) changed = changed || label[i] != best;
      label[i] = best;
    }
    std::vector<double> sw(k, 0), sh(k, 0), cnt(k, 0);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      sw[label[i]] += pts[i].w;
      sh[label[i]] += pts[i].h;
      cnt[label[i]] += 1;
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (cnt[j] > 0) centroids[j] = Prior{sw[j] / cnt[j], sh[j] / cnt[j]};
    }
    if (!changed && iter > 0) break;
  }
  std::stable_sort(centroids.begin(), centroids.end(),
                   [](const Prior& a, const Prior& b) { return a.w * a.h < b.w * b.h; });
  std::vector<std::vector<Prior>> per_map(static_cast<std::size_t>(N));
  for (int m = 0; m < N; ++m) {
    // Map N-1 (finest) receives the smallest priors.
    const std::size_t first = static_cast<std::size_t>(N - 1 - m) * priors_per_level;
    per_map[static_cast<std::size_t>(m)].assign(centroids.begin() + first, centroids.begin() + first + priors_per_level);
  }
  return per_map;
}

std::string format_priors(const std::vector<std::vector<Prior>>& priors) {
  std::ostringstream os;
  for (std::size_t m = 0; m < priors.size(); ++m) {
    if (m) os << ';';
    for (std::size_t a = 0; a < priors[m].size(); ++a) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%s%.4f:%.4f", a ? " " : "", priors[m][a].w, priors[m][a].h);
      os << buf;
    }
  }
  return os.str();
}

std::vector<std::vector<Prior>> parse_priors(const std::string& text) {
  std::vector<std::vector<Prior>> out;
  std::stringstream maps(text);
  std::string map;
  while (std::getline(maps, map, ';')) {
    std::vector<Prior> ps;
    std::stringstream items(map);
    std::string item;
    while (items >> item) {
      const auto colon = item.find(':');
      if (colon == std::string::npos) throw ConfigError("priors: expected w:h, got '" + item + "'");
      try {
        ps.push_back(Prior{std::stod(item.substr(0, colon)), std::stod(item.substr(colon + 1))});
      } catch (const std::exception&) {
        throw ConfigError("priors: bad number in '" + item + "'");
      }
      if (!(ps.back().w > 0 && ps.back().h > 0)) throw ConfigError("priors: dimensions must be positive");
    }
    if (ps.empty()) throw ConfigError("priors: empty map entry in '" + text + "'");
    out.push_back(std::move(ps));
  }
  return out;
}

#define PRBFPN_INSTANTIATE_HEAD(T)                                                                           \
  template class DetectionHead<T>;                                                                          \
  template std::vector<Tensor<T>> head_forward<T>(std::span<const FeatureMap<T>>, const DetectionHead<T>&); \
  template Tensor<T> compute_loss<T>(std::span<const Tensor<T>>, const AnchorGrid&, std::span<const Assignment>, \
                                     std::span<const std::vector<GroundTruthBox>>, int, const LossWeights&,  \
                                     LossBreakdown*);                                                       \
  template std::vector<Detection> decode<T>(std::span<const Tensor<T>>, const AnchorGrid&, int, double, int);

PRBFPN_INSTANTIATE_HEAD(float)
PRBFPN_INSTANTIATE_HEAD(double)

}  // namespace prbfpn
