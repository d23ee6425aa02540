// SPDX-License-Identifier: Apache-2.0
#include "prbfpn/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <type_traits>

#include "prbfpn/errors.hpp"

namespace prbfpn {

MatchResult match_and_score(std::span<const ImageDetections> dets, std::span<const ImageTruth> gts,
                            double iou_thresh, int class_id, const SizeRange& range, int max_dets) {
  if (dets.size() != gts.size()) throw ContractError("match_and_score: detection and gt image counts differ");
  struct Scored {
    double score;
    bool tp;
  };
  std::vector<Scored> all;
  MatchResult result;
  for (std::size_t img = 0; img < dets.size(); ++img) {
    // Gts of this class, those inside the size range first.
    std::vector<const GroundTruthBox*> g;
    for (const auto& gt : gts[img])
      if (gt.class_id == class_id && range.contains(gt.box)) g.push_back(&gt);
    const std::size_t kept = g.size();
    for (const auto& gt : gts[img])
      if (gt.class_id == class_id && !range.contains(gt.box)) g.push_back(&gt);
    result.gt_count += kept;

    std::vector<const Detection*> d;
    for (const auto& det : dets[img])
      if (det.class_id == class_id) d.push_back(&det);
    std::stable_sort(d.begin(), d.end(), [](const Detection* a, const Detection* b) { return a->score > b->score; });
    if (d.size() > static_cast<std::size_t>(max_dets)) d.resize(static_cast<std::size_t>(max_dets));

    std::vector<bool> taken(g.size(), false);
    for (const Detection* det : d) {
      int m = -1;
      double best = 0;
      for (std::size_t j = 0; j < g.size(); ++j) {
        if (taken[j]) continue;
        // A match inside the range is never traded for an ignored gt.
        if (m >= 0 && static_cast<std::size_t>(m) < kept && j >= kept) break;
        const double v = iou(det->box, g[j]->box);
        if (v < iou_thresh) continue;
        if (m < 0 || v > best) {
          m = static_cast<int>(j);
          best = v;
        }
      }
      if (m >= 0) {
        taken[static_cast<std::size_t>(m)] = true;
        if (static_cast<std::size_t>(m) < kept) all.push_back({det->score, true});
      } else if (range.contains(det->box)) {
        all.push_back({det->score, false});
      }
    }
  }
  std::stable_sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
  for (const auto& s : all) {
    result.scores.push_back(s.score);
    result.tp.push_back(s.tp);
  }
  return result;
}

std::array<double, 101> interpolated_precision(const std::vector<bool>& tp, std::size_t gt_count) {
  std::array<double, 101> q{};
  if (gt_count == 0 || tp.empty()) return q;
  const std::size_t n = tp.size();
  std::vector<double> recall(n), precision(n);
  double ctp = 0, cfp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (tp[i] ? ctp : cfp) += 1;
    recall[i] = ctp / static_cast<double>(gt_count);
    precision[i] = ctp / (ctp + cfp);
  }
  for (std::size_t i = n - 1; i > 0; --i) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  for (int j = 0; j <= 100; ++j) {
    const double r = j / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    q[static_cast<std::size_t>(j)] = it == recall.end() ? 0.0 : precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return q;
}

std::optional<double> average_precision(const std::vector<bool>& tp, std::size_t gt_count) {
  if (gt_count == 0) {
    if (tp.empty()) return std::nullopt;
    return 0.0;
  }
  const auto q = interpolated_precision(tp, gt_count);
  return std::accumulate(q.begin(), q.end(), 0.0) / 101.0;
}

namespace {

struct Accumulator {
  double sum = 0;
  std::size_t n = 0;
  void add(const std::optional<double>& v) {
    if (v) {
      sum += *v;
      ++n;
    }
  }
  double mean() const { return n ? sum / static_cast<double>(n) : 0.0; }
};

}  // namespace

EvalResult evaluate(std::span<const ImageDetections> dets, std::span<const ImageTruth> gts, const EvalConfig& config) {
  if (dets.size() != gts.size()) throw ContractError("evaluate: detection and gt image counts differ");
  const SizeRange all_sizes{};
  const SizeRange small{0, config.small_max};
  const SizeRange medium{config.small_max, config.medium_max};
  const SizeRange large{config.medium_max, std::numeric_limits<double>::infinity()};

  EvalResult r;
  Accumulator ap, ap50, ap75, aps, apm, apl;
  for (std::size_t t = 0; t < kIouThresholds.size(); ++t) {
    const double thr = kIouThresholds[t];
    std::array<double, 101> pr_sum{};
    std::size_t pr_n = 0;
    for (int k = 0; k < config.num_classes; ++k) {
      const MatchResult m = match_and_score(dets, gts, thr, k, all_sizes, config.max_dets);
      const auto v = average_precision(m.tp, m.gt_count);
      ap.add(v);
      if (t == 0) ap50.add(v);
      if (t == 5) ap75.add(v);
      if (v) {
        const auto q = interpolated_precision(m.tp, m.gt_count);
        for (int j = 0; j <= 100; ++j) pr_sum[j] += q[j];
        ++pr_n;
      }
      for (auto [range, acc] : {std::pair{&small, &aps}, std::pair{&medium, &apm}, std::pair{&large, &apl}}) {
        const MatchResult mr = match_and_score(dets, gts, thr, k, *range, config.max_dets);
        acc->add(average_precision(mr.tp, mr.gt_count));
      }
    }
    for (int j = 0; j <= 100; ++j) r.pr[t][j] = pr_n ? pr_sum[j] / static_cast<double>(pr_n) : 0.0;
  }
  r.ap = ap.mean();
  r.ap50 = ap50.mean();
  r.ap75 = ap75.mean();
  r.ap_s = aps.mean();
  r.ap_m = apm.mean();
  r.ap_l = apl.mean();
  return r;
}

namespace {

template <typename Row>
std::vector<std::vector<Row>> read_rows(const std::filesystem::path& path, int image_count, bool with_score) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::vector<std::vector<Row>> out(static_cast<std::size_t>(image_count));
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    int img = 0;
    Row row{};
    Box& b = row.box;
    is >> img >> row.class_id >> b.cx >> b.cy >> b.w >> b.h;
    if constexpr (std::is_same_v<Row, Detection>) {
      if (with_score) is >> row.score;
    }
    if (!is || img < 0 || img >= image_count) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": malformed box line");
    }
    out[static_cast<std::size_t>(img)].push_back(row);
  }
  return out;
}

}  // namespace

void write_detections(const std::filesystem::path& path, std::span<const ImageDetections> dets) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  char line[192];
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (const auto& d : dets[i]) {
      std::snprintf(line, sizeof line, "%zu\t%d\t%.4f\t%.4f\t%.4f\t%.4f\t%.6f\n", i, d.class_id, d.box.cx, d.box.cy,
                    d.box.w, d.box.h, d.score);
      out << line;
    }
}

std::vector<ImageDetections> read_detections(const std::filesystem::path& path, int image_count) {
  return read_rows<Detection>(path, image_count, true);
}

void write_ground_truth(const std::filesystem::path& path, std::span<const ImageTruth> gts) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  char line[160];
  for (std::size_t i = 0; i < gts.size(); ++i)
    for (const auto& g : gts[i]) {
      std::snprintf(line, sizeof line, "%zu\t%d\t%.4f\t%.4f\t%.4f\t%.4f\n", i, g.class_id, g.box.cx, g.box.cy,
                    g.box.w, g.box.h);
      out << line;
    }
}

std::vector<ImageTruth> read_ground_truth(const std::filesystem::path& path, int image_count) {
  return read_rows<GroundTruthBox>(path, image_count, false);
}

std::string format_report(const EvalResult& r, const EvalConfig& c, std::size_t images) {
  std::ostringstream os;
  char buf[128];
  os << "# size buckets by sqrt(area) in px: s=[0," << c.small_max << ") m=[" << c.small_max << ','
     << c.medium_max << ") l=[" << c.medium_max << ",inf)\n";
  os << "images=" << images << "\n";
  os << "classes=" << c.num_classes << "\n";
  os << "max_dets=" << c.max_dets << "\n";
  for (auto [k, v] : {std::pair{"ap", r.ap}, std::pair{"ap50", r.ap50}, std::pair{"ap75", r.ap75},
                      std::pair{"ap_s", r.ap_s}, std::pair{"ap_m", r.ap_m}, std::pair{"ap_l", r.ap_l}}) {
    std::snprintf(buf, sizeof buf, "%s=%.6f\n", k, v);
    os << buf;
  }
  os << "# pr\tiou\trecall\tprecision\n";
  for (std::size_t t = 0; t < kIouThresholds.size(); ++t)
    for (int j = 0; j <= 100; ++j) {
      std::snprintf(buf, sizeof buf, "pr\t%.2f\t%.2f\t%.6f\n", kIouThresholds[t], j / 100.0, r.pr[t][j]);
      os << buf;
    }
  return os.str();
}

void write_report(const std::filesystem::path& path, const EvalResult& result, const EvalConfig& config,
                  std::size_t images) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << format_report(result, config, images);
}

}  // namespace prbfpn
