// SPDX-License-Identifier: Apache-2.0
#include "prbfpn/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include "prbfpn/errors.hpp"
#include "prbfpn/rng.hpp"

namespace prbfpn {

namespace {

constexpr double kMaxGtIou = 0.3;
constexpr int kMaxAttempts = 100;
constexpr std::uint64_t kLayoutStream = 0x6C61796F7574ULL;
constexpr std::uint64_t kPixelStream = 0x706978656C73ULL;

constexpr std::array<std::array<double, 3>, kMaxClasses> kClassColor{{
    {0.85, 0.15, 0.15},  // disk
    {0.15, 0.80, 0.20},  // square
    {0.15, 0.25, 0.90},  // triangle
}};

int pick_bucket(const SceneConfig& cfg, double u) {
  double acc = 0;
  for (int b = 0; b < 3; ++b) {
    acc += cfg.weights[b];
    if (u < acc) return b;
  }
  return 3;
}

bool inside(ShapeKind kind, const Box& box, double px, double py) {
  if (px < box.x0() || px > box.x1() || py < box.y0() || py > box.y1()) return false;
  switch (kind) {
    case ShapeKind::kDisk: {
      const double dx = px - box.cx;
      const double dy = py - box.cy;
      const double r = 0.5 * box.w;
      return dx * dx + dy * dy <= r * r;
    }
    case ShapeKind::kSquare:
      return true;
    case ShapeKind::kTriangle: {
      // Apex at the top centre, base along the bottom edge.
      const double t = (py - box.y0()) / box.h;
      return std::abs(px - box.cx) <= 0.5 * box.w * t;
    }
  }
  return false;
}

std::string fingerprint(const SceneConfig& c, std::uint64_t seed) {
  std::ostringstream os;
  os << c.image_side << ',' << c.num_classes << ',' << c.objects_min << ',' << c.objects_max << ',';
  for (const auto& b : c.buckets) os << b.lo << '-' << b.hi << ',';
  char buf[32];
  for (double w : c.weights) {
    std::snprintf(buf, sizeof buf, "%a,", w);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "%a,", c.noise_std);
  os << buf << seed;
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : os.str()) h = (h ^ ch) * 1099511628211ULL;
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

void SceneConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("data: " + m); };
  if (image_side < 8) fail("image_side must be >= 8");
  if (num_classes < 1 || num_classes > kMaxClasses) fail("num_classes must be in 1..3");
  if (objects_min < 0 || objects_max < objects_min) fail("need 0 <= objects_min <= objects_max");
  double total = 0;
  for (int b = 0; b < 4; ++b) {
    const auto& r = buckets[b];
    if (r.lo < 2 || r.hi < r.lo) fail("size bucket " + std::to_string(b) + " must satisfy 2 <= lo <= hi");
    if (r.hi > image_side) fail("size bucket " + std::to_string(b) + " exceeds image_side");
    if (b > 0 && r.lo <= buckets[b - 1].hi) fail("size buckets overlap");
    if (!(weights[b] >= 0)) fail("size weights must be non-negative");
    total += weights[b];
  }
  if (std::abs(total - 1.0) > 1e-6) fail("size weights must sum to 1");
  if (!(noise_std >= 0)) fail("noise_std must be non-negative");
}

std::array<double, 3> SceneConfig::bucket_cutoffs() const {
  return {0.5 * (buckets[0].hi + buckets[1].lo), 0.5 * (buckets[1].hi + buckets[2].lo),
          0.5 * (buckets[2].hi + buckets[3].lo)};
}

int size_bucket(const SceneConfig& config, double side) {
  const auto cut = config.bucket_cutoffs();
  int b = 0;
  while (b < 3 && side >= cut[b]) ++b;
  return b;
}

std::uint64_t split_seed(std::uint64_t base_seed, Split split) {
  return hash_combine(base_seed, static_cast<std::uint64_t>(split));
}

std::vector<GroundTruthBox> generate_boxes(const SceneConfig& config, std::uint64_t seed, int index) {
  CounterRng rng(seed, hash_combine(static_cast<std::uint64_t>(index), kLayoutStream));
  const int count = rng.uniform_int(config.objects_min, config.objects_max);
  std::vector<GroundTruthBox> boxes;
  for (int j = 0; j < count; ++j) {
    const int cls = rng.uniform_int(0, config.num_classes - 1);
    const SizeBucket& range = config.buckets[pick_bucket(config, rng.uniform())];
    const int s = rng.uniform_int(range.lo, range.hi);
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      const int x0 = rng.uniform_int(0, config.image_side - s);
      const int y0 = rng.uniform_int(0, config.image_side - s);
      const Box b{x0 + 0.5 * s, y0 + 0.5 * s, static_cast<double>(s), static_cast<double>(s)};
      const bool ok = std::all_of(boxes.begin(), boxes.end(),
                                  [&](const GroundTruthBox& g) { return iou(g.box, b) <= kMaxGtIou; });
      if (ok) {
        boxes.push_back(GroundTruthBox{b, cls});
        break;
      }
    }
  }
  return boxes;
}

std::vector<std::uint8_t> shape_mask(ShapeKind kind, const Box& box, int side) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(side) * side, 0);
  const int x0 = std::max(0, static_cast<int>(std::floor(box.x0())));
  const int x1 = std::min(side, static_cast<int>(std::ceil(box.x1())));
  const int y0 = std::max(0, static_cast<int>(std::floor(box.y0())));
  const int y1 = std::min(side, static_cast<int>(std::ceil(box.y1())));
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) mask[static_cast<std::size_t>(y) * side + x] = inside(kind, box, x + 0.5, y + 0.5);
  return mask;
}

Sample generate_sample(const SceneConfig& config, std::uint64_t seed, int index) {
  const int side = config.image_side;
  Sample sample;
  sample.boxes = generate_boxes(config, seed, index);
  CounterRng rng(seed, hash_combine(static_cast<std::uint64_t>(index), kPixelStream));

  std::vector<float> px(static_cast<std::size_t>(3) * side * side);
  const std::size_t plane = static_cast<std::size_t>(side) * side;
  for (int ch = 0; ch < 3; ++ch) {
    const double base = rng.uniform(0.35, 0.65);
    const double gx = rng.uniform(-0.2, 0.2);
    const double gy = rng.uniform(-0.2, 0.2);
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        px[ch * plane + static_cast<std::size_t>(y) * side + x] =
            static_cast<float>(base + gx * ((x + 0.5) / side - 0.5) + gy * ((y + 0.5) / side - 0.5));
      }
  }

  // Larger shapes first so small ones stay visible on top of them.
  std::vector<std::size_t> order(sample.boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sample.boxes[a].box.w > sample.boxes[b].box.w; });
  for (std::size_t i : order) {
    const auto& gt = sample.boxes[i];
    std::array<double, 3> color;
    for (int ch = 0; ch < 3; ++ch) color[ch] = kClassColor[gt.class_id][ch] + rng.uniform(-0.1, 0.1);
    const auto mask = shape_mask(static_cast<ShapeKind>(gt.class_id), gt.box, side);
    for (std::size_t p = 0; p < plane; ++p) {
      if (!mask[p]) continue;
      for (int ch = 0; ch < 3; ++ch) px[ch * plane + p] = static_cast<float>(color[ch]);
    }
  }
  if (config.noise_std > 0) {
    for (float& v : px) v = static_cast<float>(v + config.noise_std * rng.normal());
  }
  for (float& v : px) v = std::clamp(v, 0.0f, 1.0f);
  sample.image = Tensor<float>(Shape{1, 3, side, side}, std::move(px));
  return sample;
}

Sample generate_sample(const SceneConfig& config, int index) { return generate_sample(config, config.seed, index); }

Dataset::Dataset(SceneConfig config, Split split, int count, std::optional<std::filesystem::path> cache_dir)
    : config_(std::move(config)), seed_(split_seed(config_.seed, split)), count_(count),
      cache_dir_(std::move(cache_dir)) {
  config_.validate();
  if (count < 1) throw ConfigError("dataset: count must be >= 1");
}

std::vector<GroundTruthBox> Dataset::boxes(int index) const { return generate_boxes(config_, seed_, index); }

Sample Dataset::get(int index) const {
  if (index < 0 || index >= count_) {
    throw ContractError("dataset index " + std::to_string(index) + " out of range 0.." + std::to_string(count_ - 1));
  }
  if (!cache_dir_) return generate_sample(config_, seed_, index);

  const std::string stem = "scene_" + fingerprint(config_, seed_) + "_" + std::to_string(index);
  const auto bin = *cache_dir_ / (stem + ".bin");
  const auto gtp = *cache_dir_ / (stem + ".gt");
  const int side = config_.image_side;
  const std::size_t n = static_cast<std::size_t>(3) * side * side;
  if (std::filesystem::exists(bin) && std::filesystem::exists(gtp)) {
    std::ifstream in(bin, std::ios::binary);
    std::vector<unsigned char> raw(n * 4);
    if (in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
      std::vector<float> px(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::uint32_t u = raw[4 * i] | (raw[4 * i + 1] << 8) | (raw[4 * i + 2] << 16) |
                                (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
        std::memcpy(&px[i], &u, 4);
      }
      Sample s;
      s.image = Tensor<float>(Shape{1, 3, side, side}, std::move(px));
      std::ifstream g(gtp);
      int img = 0;
      GroundTruthBox b;
      while (g >> img >> b.class_id >> b.box.cx >> b.box.cy >> b.box.w >> b.box.h) s.boxes.push_back(b);
      return s;
    }
  }
  Sample s = generate_sample(config_, seed_, index);
  std::filesystem::create_directories(*cache_dir_);
  {
    std::vector<unsigned char> raw(n * 4);
    const auto px = s.image.data();
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t u;
      std::memcpy(&u, &px[i], 4);
      for (int k = 0; k < 4; ++k) raw[4 * i + k] = static_cast<unsigned char>(u >> (8 * k));
    }
    std::ofstream out(bin, std::ios::binary);
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  }
  std::ofstream g(gtp);
  char line[160];
  for (const auto& b : s.boxes) {
    std::snprintf(line, sizeof line, "%d\t%d\t%.6f\t%.6f\t%.6f\t%.6f\n", index, b.class_id, b.box.cx, b.box.cy,
                  b.box.w, b.box.h);
    g << line;
  }
  return s;
}

std::vector<Sample> Dataset::get_many(std::span<const int> indices, int workers) const {
  std::vector<Sample> out(indices.size());
  const int n = static_cast<int>(indices.size());
  workers = std::clamp(workers, 1, std::max(n, 1));
  // The disk cache is written lazily, so it stays on one thread.
  if (workers == 1 || cache_dir_) {
    for (int i = 0; i < n; ++i) out[i] = get(indices[i]);
    return out;
  }
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) out[i] = get(indices[i]);
    });
  }
  for (auto& t : pool) t.join();
  return out;
}

std::vector<int> epoch_order(int count, std::uint64_t seed, int epoch) {
  std::vector<int> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), 0);
  CounterRng rng(seed, hash_combine(static_cast<std::uint64_t>(epoch), 0x73687566ULL));
  for (int i = count - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, i)]);
  return order;
}

Tensor<float> stack_images(std::span<const Sample> samples) {
  if (samples.empty()) throw ContractError("stack_images: empty batch");
  const Shape s0 = samples[0].image.shape();
  std::vector<float> data;
  data.reserve(s0.numel() * samples.size());
  for (const auto& s : samples) {
    if (!(s.image.shape() == s0)) throw ShapeError("stack_images: mixed image shapes");
    data.insert(data.end(), s.image.data().begin(), s.image.data().end());
  }
  return Tensor<float>(Shape{static_cast<int>(samples.size()), s0.c, s0.h, s0.w}, std::move(data));
}

}  // namespace prbfpn
