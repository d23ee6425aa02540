// Test-only reference implementations. Each one is written directly from
// the definition, with no code shared with the library beyond plain data
// types, so agreement between the two is meaningful.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <vector>

#include "prbfpn/box.hpp"
#include "prbfpn/head.hpp"
#include "prbfpn/tensor.hpp"

namespace oracle {

using prbfpn::Box;
using prbfpn::Detection;
using prbfpn::GroundTruthBox;
using prbfpn::Shape;

// Six nested loops, accumulated in double.
inline std::vector<double> conv2d(const std::vector<double>& x, Shape xs, const std::vector<double>& w, Shape ws,
                                  const std::vector<double>& b, int stride, int pad, Shape* out_shape = nullptr) {
  const int oh = (xs.h + 2 * pad - ws.h) / stride + 1;
  const int ow = (xs.w + 2 * pad - ws.w) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(xs.n) * ws.n * oh * ow);
  for (int n = 0; n < xs.n; ++n)
    for (int o = 0; o < ws.n; ++o)
      for (int y = 0; y < oh; ++y)
        for (int xq = 0; xq < ow; ++xq) {
          double acc = b[o];
          for (int c = 0; c < xs.c; ++c)
            for (int ky = 0; ky < ws.h; ++ky)
              for (int kx = 0; kx < ws.w; ++kx) {
                const int iy = y * stride - pad + ky;
                const int ix = xq * stride - pad + kx;
                if (iy < 0 || ix < 0 || iy >= xs.h || ix >= xs.w) continue;
                acc += x[((static_cast<std::size_t>(n) * xs.c + c) * xs.h + iy) * xs.w + ix] *
                       w[((static_cast<std::size_t>(o) * ws.c + c) * ws.h + ky) * ws.w + kx];
              }
          out[((static_cast<std::size_t>(n) * ws.n + o) * oh + y) * ow + xq] = acc;
        }
  if (out_shape) *out_shape = Shape{xs.n, ws.n, oh, ow};
  return out;
}

inline std::vector<double> maxpool2(const std::vector<double>& x, Shape s) {
  std::vector<double> out;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h / 2; ++y)
        for (int xq = 0; xq < s.w / 2; ++xq) {
          double m = -std::numeric_limits<double>::infinity();
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              m = std::max(m, x[((static_cast<std::size_t>(n) * s.c + c) * s.h + 2 * y + dy) * s.w + 2 * xq + dx]);
          out.push_back(m);
        }
  return out;
}

// Inverse of space_to_depth: output channel c*b*b + dy*b + dx at (y, x)
// came from input channel c at (y*b + dy, x*b + dx).
inline std::vector<double> depth_to_space(const std::vector<double>& z, Shape zs, int b) {
  const int c_in = zs.c / (b * b);
  const int h = zs.h * b;
  const int w = zs.w * b;
  std::vector<double> x(z.size());
  for (int n = 0; n < zs.n; ++n)
    for (int oc = 0; oc < zs.c; ++oc)
      for (int y = 0; y < zs.h; ++y)
        for (int xq = 0; xq < zs.w; ++xq) {
          const int c = oc / (b * b);
          const int dy = (oc % (b * b)) / b;
          const int dx = oc % b;
          x[((static_cast<std::size_t>(n) * c_in + c) * h + y * b + dy) * w + xq * b + dx] =
              z[((static_cast<std::size_t>(n) * zs.c + oc) * zs.h + y) * zs.w + xq];
        }
  return x;
}

inline double box_iou(const Box& a, const Box& b) {
  const double ax0 = a.cx - a.w / 2, ax1 = a.cx + a.w / 2, ay0 = a.cy - a.h / 2, ay1 = a.cy + a.h / 2;
  const double bx0 = b.cx - b.w / 2, bx1 = b.cx + b.w / 2, by0 = b.cy - b.h / 2, by1 = b.cy + b.h / 2;
  const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
  const double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
  const double inter = iw * ih;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// Repeatedly takes the best remaining detection (earliest on ties) and
// strikes every same-class detection overlapping it too much.
inline std::vector<std::size_t> nms_keep(const std::vector<Detection>& d, double thr) {
  std::vector<bool> alive(d.size(), true);
  std::vector<std::size_t> keep;
  while (true) {
    std::size_t best = d.size();
    for (std::size_t i = 0; i < d.size(); ++i)
      if (alive[i] && (best == d.size() || d[i].score > d[best].score)) best = i;
    if (best == d.size()) break;
    keep.push_back(best);
    alive[best] = false;
    for (std::size_t i = 0; i < d.size(); ++i)
      if (alive[i] && d[i].class_id == d[best].class_id && box_iou(d[i].box, d[best].box) > thr) alive[i] = false;
  }
  return keep;
}

struct AssignmentTable {
  std::vector<int> role;  // 0 negative, 1 positive, 2 ignored
  std::vector<int> gt_of_anchor;
};

// Scans every anchor for every gt.
inline AssignmentTable assign(const prbfpn::AnchorGrid& grid, const std::vector<GroundTruthBox>& gts) {
  AssignmentTable t;
  t.role.assign(grid.anchors.size(), 0);
  t.gt_of_anchor.assign(grid.anchors.size(), -1);
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const Box& gb = gts[g].box;
    long best = -1;
    double best_iou = 0;
    for (std::size_t i = 0; i < grid.anchors.size(); ++i) {
      const auto& a = grid.anchors[i];
      const int side = grid.maps[a.map].side;
      const int col = std::min(side - 1, std::max(0, static_cast<int>(gb.cx / a.stride)));
      const int row = std::min(side - 1, std::max(0, static_cast<int>(gb.cy / a.stride)));
      if (a.row != row || a.col != col || t.role[i] == 1) continue;
      const Box ab{(a.col + 0.5) * a.stride, (a.row + 0.5) * a.stride, a.prior_w, a.prior_h};
      const double v = box_iou(gb, ab);
      if (best < 0 || v > best_iou) {
        best = static_cast<long>(i);
        best_iou = v;
      }
    }
    if (best >= 0) {
      t.role[best] = 1;
      t.gt_of_anchor[best] = static_cast<int>(g);
    }
  }
  for (std::size_t i = 0; i < grid.anchors.size(); ++i) {
    if (t.role[i] == 1) continue;
    const auto& a = grid.anchors[i];
    const Box ab{(a.col + 0.5) * a.stride, (a.row + 0.5) * a.stride, a.prior_w, a.prior_h};
    for (const auto& g : gts)
      if (box_iou(ab, g.box) > 0.5) t.role[i] = 2;
  }
  return t;
}

// Interpolated precision at recall r: the best precision at any rank whose
// recall reaches r, read straight off the PR points.
inline double ap101(const std::vector<bool>& tp, std::size_t gt) {
  if (gt == 0) return tp.empty() ? std::numeric_limits<double>::quiet_NaN() : 0.0;
  std::vector<double> rec, prec;
  double t = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    t += tp[i] ? 1 : 0;
    rec.push_back(t / gt);
    prec.push_back(t / (i + 1));
  }
  double total = 0;
  for (int j = 0; j <= 100; ++j) {
    const double r = j / 100.0;
    double p = 0;
    for (std::size_t i = 0; i < rec.size(); ++i)
      if (rec[i] >= r) p = std::max(p, prec[i]);
    total += p;
  }
  return total / 101;
}

struct Metrics {
  double ap, ap50, ap75, ap_s, ap_m, ap_l;
};

// Second evaluator. Per (class, threshold, size range): COCO ignore rules,
// detections ranked globally by score with image order breaking ties.
inline Metrics evaluate(const std::vector<std::vector<Detection>>& dets,
                        const std::vector<std::vector<GroundTruthBox>>& gts, int classes, double s_max,
                        double m_max, int max_dets = 100) {
  const double inf = std::numeric_limits<double>::infinity();
  const std::array<std::array<double, 2>, 4> ranges{{{0, inf}, {0, s_max}, {s_max, m_max}, {m_max, inf}}};
  std::array<double, 6> sums{};
  std::array<int, 6> counts{};
  for (int ri = 0; ri < 4; ++ri) {
    const double lo = ranges[ri][0], hi = ranges[ri][1];
    auto in_range = [&](const Box& b) {
      const double s = std::sqrt(b.w * b.h);
      return s >= lo && s < hi;
    };
    for (int ti = 0; ti < 10; ++ti) {
      const double thr = (50 + 5 * ti) / 100.0;
      for (int k = 0; k < classes; ++k) {
        struct Row {
          double score;
          std::size_t img, order;
          bool tp;
        };
        std::vector<Row> rows;
        std::size_t npos = 0;
        for (std::size_t im = 0; im < dets.size(); ++im) {
          std::vector<std::size_t> gi;  // in-range gts then out-of-range gts
          for (std::size_t j = 0; j < gts[im].size(); ++j)
            if (gts[im][j].class_id == k && in_range(gts[im][j].box)) gi.push_back(j);
          const std::size_t n_in = gi.size();
          npos += n_in;
          for (std::size_t j = 0; j < gts[im].size(); ++j)
            if (gts[im][j].class_id == k && !in_range(gts[im][j].box)) gi.push_back(j);
          std::vector<std::size_t> di;
          for (std::size_t j = 0; j < dets[im].size(); ++j)
            if (dets[im][j].class_id == k) di.push_back(j);
          std::stable_sort(di.begin(), di.end(),
                           [&](std::size_t a, std::size_t b) { return dets[im][a].score > dets[im][b].score; });
          if (di.size() > static_cast<std::size_t>(max_dets)) di.resize(max_dets);
          std::vector<char> used(gi.size(), 0);
          for (std::size_t q = 0; q < di.size(); ++q) {
            const Detection& d = dets[im][di[q]];
            // Best in-range match first; fall back to out-of-range gts.
            long m = -1;
            for (int pass = 0; pass < 2 && m < 0; ++pass) {
              double best = -1;
              const std::size_t from = pass == 0 ? 0 : n_in, to = pass == 0 ? n_in : gi.size();
              for (std::size_t g = from; g < to; ++g) {
                if (used[g]) continue;
                const double v = box_iou(d.box, gts[im][gi[g]].box);
                if (v >= thr && v > best) {
                  best = v;
                  m = static_cast<long>(g);
                }
              }
            }
            if (m >= 0) {
              used[m] = 1;
              if (static_cast<std::size_t>(m) < n_in) rows.push_back({d.score, im, q, true});
            } else if (in_range(d.box)) {
              rows.push_back({d.score, im, q, false});
            }
          }
        }
        std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
          if (a.score != b.score) return a.score > b.score;
          if (a.img != b.img) return a.img < b.img;
          return a.order < b.order;
        });
        std::vector<bool> tp;
        for (const auto& r : rows) tp.push_back(r.tp);
        const double v = ap101(tp, npos);
        if (std::isnan(v)) continue;
        const int slot = ri == 0 ? 0 : ri + 2;
        sums[slot] += v;
        counts[slot] += 1;
        if (ri == 0 && ti == 0) sums[1] += v, counts[1] += 1;
        if (ri == 0 && ti == 5) sums[2] += v, counts[2] += 1;
      }
    }
  }
  auto mean = [&](int i) { return counts[i] ? sums[i] / counts[i] : 0.0; };
  return Metrics{mean(0), mean(1), mean(2), mean(3), mean(4), mean(5)};
}

inline double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double bce(double x, double y) { return -(y * std::log(sig(x)) + (1 - y) * std::log(1 - sig(x))); }
inline double huber(double d) { return std::abs(d) < 1 ? 0.5 * d * d : std::abs(d) - 0.5; }

// Detection loss written out term by term. raw[m] holds map m as
// (n, A*(5+K), side, side) values.
inline double detection_loss(const std::vector<std::vector<double>>& raw, const prbfpn::AnchorGrid& grid,
                             const std::vector<AssignmentTable>& tables,
                             const std::vector<std::vector<GroundTruthBox>>& gts, int K, int batch) {
  double total = 0;
  for (int n = 0; n < batch; ++n) {
    double P = 0, Ng = 0;
    for (int r : tables[n].role) {
      P += r == 1;
      Ng += r == 0;
    }
    P = std::max(P, 1.0);
    Ng = std::max(Ng, 1.0);
    double box = 0, obj = 0, cls = 0;
    for (std::size_t i = 0; i < grid.anchors.size(); ++i) {
      const auto& a = grid.anchors[i];
      const int side = grid.maps[a.map].side;
      const int A = static_cast<int>(grid.maps[a.map].priors.size());
      auto v = [&](int j) {
        const int ch = a.prior * (5 + K) + j;
        return raw[a.map][((static_cast<std::size_t>(n) * A * (5 + K) + ch) * side + a.row) * side + a.col];
      };
      if (tables[n].role[i] == 0) obj += bce(v(4), 0) / Ng;
      if (tables[n].role[i] != 1) continue;
      const auto& g = gts[n][tables[n].gt_of_anchor[i]];
      obj += bce(v(4), 1) / P;
      box += huber(sig(v(0)) - (g.box.cx / a.stride - a.col)) / P;
      box += huber(sig(v(1)) - (g.box.cy / a.stride - a.row)) / P;
      box += huber(v(2) - std::log(g.box.w / a.prior_w)) / P;
      box += huber(v(3) - std::log(g.box.h / a.prior_h)) / P;
      for (int k = 0; k < K; ++k) cls += bce(v(5 + k), k == g.class_id ? 1 : 0) / P;
    }
    total += (5 * box + obj + cls) / batch;
  }
  return total;
}

struct CountConfig {
  int L, N, c, c_head, K, A, in_ch = 3;
  bool residual, parallel, bfm;
};

// Scalar count of every filter and bias, by block.
inline std::size_t backbone_params(const CountConfig& k) {
  const std::size_t c = k.c;
  return 9 * k.in_ch * c + c + (k.L - 1) * (9 * c * c + c);
}

inline std::size_t model_params(const CountConfig& k) {
  const std::size_t c = k.c, h = k.c_head;
  std::size_t total = backbone_params(k);
  const int paths = k.parallel ? k.N : 1;
  for (int n = 1; n <= paths; ++n) {
    for (int s = 1; s <= k.N; ++s) {
      const int level = k.L - n + 1 - (s - 1);
      const bool shallow = level > 1;
      const bool deep = level < k.L;
      const std::size_t m = c * (1 + shallow + deep);
      if (shallow) total += 4 * c * c + c;  // reorg fuse
      total += 2 * m;                       // depthwise scale and bias
      total += m * c + c;                   // CORE fuse
      total += 9 * c * c + c;               // convolution module
      if (k.residual && s > 1) total += c * c + c;
    }
  }
  total += k.N * (paths * c * h + h);
  if (k.bfm) total += (k.N - 1) * (9 * h * h + h + 2 * h * h + h);
  return total;
}

inline std::size_t head_params(const CountConfig& k) {
  const std::size_t out = k.A * (5 + k.K);
  return k.N * (k.c_head * out + out);
}

}  // namespace oracle
