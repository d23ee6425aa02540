// SPDX-License-Identifier: Apache-2.0
#include "prbfpn/run_config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "prbfpn/errors.hpp"
#include "prbfpn/head.hpp"

namespace prbfpn {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct BadValue {
  std::string what;
};

template <typename I>
I parse_integer(const std::string& v) {
  I out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw BadValue{"expected an integer"};
  return out;
}

double parse_real(const std::string& v) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw BadValue{"expected a number"};
  }
  if (used != v.size()) throw BadValue{"expected a number"};
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw BadValue{"expected true or false"};
}

SizeBucket parse_range(const std::string& v) {
  const auto dash = v.find('-');
  if (dash == std::string::npos) throw BadValue{"expected lo-hi"};
  return SizeBucket{parse_integer<int>(trim(v.substr(0, dash))), parse_integer<int>(trim(v.substr(dash + 1)))};
}

std::vector<int> parse_int_list(const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_integer<int>(item));
  }
  return out;
}

std::string real_text(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  // Prefer the shortest text that reads back to the same value.
  for (int prec = 1; prec < 17; ++prec) {
    char shorter[40];
    std::snprintf(shorter, sizeof shorter, "%.*g", prec, v);
    if (std::stod(shorter) == v) return shorter;
  }
  return buf;
}

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define INT_KEY(name, field) \
  Key{name, [](RunConfig& c, const std::string& v) { c.field = parse_integer<int>(v); }, \
      [](const RunConfig& c) { return std::to_string(c.field); }}
#define U64_KEY(name, field) \
  Key{name, [](RunConfig& c, const std::string& v) { c.field = parse_integer<std::uint64_t>(v); }, \
      [](const RunConfig& c) { return std::to_string(c.field); }}
#define REAL_KEY(name, field) \
  Key{name, [](RunConfig& c, const std::string& v) { c.field = parse_real(v); }, \
      [](const RunConfig& c) { return real_text(c.field); }}
#define BOOL_KEY(name, field) \
  Key{name, [](RunConfig& c, const std::string& v) { c.field = parse_bool(v); }, \
      [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }}
#define PATH_KEY(name, field) \
  Key{name, [](RunConfig& c, const std::string& v) { c.field = v; }, \
      [](const RunConfig& c) { return c.field.string(); }}
#define RANGE_KEY(name, i) \
  Key{name, [](RunConfig& c, const std::string& v) { c.data.buckets[i] = parse_range(v); }, \
      [](const RunConfig& c) { \
        return std::to_string(c.data.buckets[i].lo) + "-" + std::to_string(c.data.buckets[i].hi); \
      }}

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      INT_KEY("model.L", model.L),
      INT_KEY("model.N", model.N),
      INT_KEY("model.c_fuse", model.c_fuse),
      INT_KEY("model.c_head", model.c_head),
      BOOL_KEY("model.use_residual", model.use_residual),
      BOOL_KEY("model.use_parallel", model.use_parallel),
      BOOL_KEY("model.use_bfm", model.use_bfm),
      INT_KEY("model.priors_per_level", priors_per_level),
      Key{"model.priors", [](RunConfig& c, const std::string& v) { c.priors = v; },
          [](const RunConfig& c) { return c.priors; }},
      INT_KEY("data.image_side", data.image_side),
      INT_KEY("data.num_classes", data.num_classes),
      INT_KEY("data.objects_min", data.objects_min),
      INT_KEY("data.objects_max", data.objects_max),
      RANGE_KEY("data.size_tiny", 0),
      RANGE_KEY("data.size_small", 1),
      RANGE_KEY("data.size_medium", 2),
      RANGE_KEY("data.size_large", 3),
      REAL_KEY("data.weight_tiny", data.weights[0]),
      REAL_KEY("data.weight_small", data.weights[1]),
      REAL_KEY("data.weight_medium", data.weights[2]),
      REAL_KEY("data.weight_large", data.weights[3]),
      REAL_KEY("data.noise_std", data.noise_std),
      U64_KEY("data.seed", data.seed),
      INT_KEY("data.train_count", train_count),
      INT_KEY("data.val_count", val_count),
      INT_KEY("train.epochs", train.epochs),
      INT_KEY("train.batch_size", train.batch_size),
      REAL_KEY("train.lr", train.lr),
      REAL_KEY("train.momentum", train.momentum),
      Key{"train.lr_decay_epochs",
          [](RunConfig& c, const std::string& v) { c.train.lr_decay_epochs = parse_int_list(v); },
          [](const RunConfig& c) {
            std::string s;
            for (std::size_t i = 0; i < c.train.lr_decay_epochs.size(); ++i)
              s += (i ? "," : "") + std::to_string(c.train.lr_decay_epochs[i]);
            return s;
          }},
      U64_KEY("train.seed", train.seed),
      INT_KEY("train.val_every", train.val_every),
      INT_KEY("train.workers", train.workers),
      BOOL_KEY("train.deterministic", deterministic),
      REAL_KEY("eval.score_thresh", eval.score_thresh),
      REAL_KEY("eval.nms_iou", eval.nms_iou),
      PATH_KEY("paths.checkpoint_dir", paths.checkpoint_dir),
      PATH_KEY("paths.report_dir", paths.report_dir),
      PATH_KEY("paths.output_dir", paths.output_dir),
      PATH_KEY("paths.cache_dir", paths.cache_dir),
      INT_KEY("ablate.seeds", ablate_seeds),
  };
  return table;
}

}  // namespace

void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  model.validate();
  data.validate();
  if (priors_per_level < 1) fail("model.priors_per_level must be >= 1");
  if (data.image_side % (1 << (model.L - 1)) != 0) {
    fail("data.image_side " + std::to_string(data.image_side) + " must be divisible by 2^(L-1) = " +
         std::to_string(1 << (model.L - 1)));
  }
  if (!priors.empty()) {
    const auto p = parse_priors(priors);
    if (static_cast<int>(p.size()) != model.N) fail("model.priors must list one prior set per prediction map");
    for (const auto& m : p)
      if (static_cast<int>(m.size()) != priors_per_level) fail("model.priors must hold priors_per_level per map");
  }
  if (train_count < 1 || val_count < 1) fail("data.train_count and data.val_count must be >= 1");
  if (train.epochs < 0) fail("train.epochs must be >= 0");
  if (train.batch_size < 1) fail("train.batch_size must be >= 1");
  if (!(train.lr >= 0)) fail("train.lr must be >= 0");
  if (!(train.momentum >= 0 && train.momentum < 1)) fail("train.momentum must be in [0, 1)");
  for (int e : train.lr_decay_epochs)
    if (e < 0) fail("train.lr_decay_epochs must be non-negative");
  if (train.val_every < 0) fail("train.val_every must be >= 0");
  if (train.workers < 1) fail("train.workers must be >= 1");
  if (!(eval.score_thresh >= 0 && eval.score_thresh <= 1)) fail("eval.score_thresh must be in [0, 1]");
  if (!(eval.nms_iou > 0 && eval.nms_iou < 1)) fail("eval.nms_iou must be in (0, 1)");
  if (ablate_seeds < 1) fail("ablate.seeds must be >= 1");
}

RunConfig parse_run_config(const std::string& text, const std::string& origin) {
  RunConfig config;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto& table = keys();
    const auto it = std::find_if(table.begin(), table.end(), [&](const Key& k) { return k.name == key; });
    if (it == table.end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + "key '" + key + "' given twice");
    try {
      it->set(config, value);
    } catch (const BadValue& e) {
      throw ConfigError(where + key + ": " + e.what + ", got '" + value + "'");
    }
  }
  config.model.in_channels = 3;
  config.model.seed = config.train.seed;
  config.validate();
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.string());
}

std::string format_run_config(const RunConfig& config) {
  std::ostringstream os;
  std::string section;
  for (const Key& k : keys()) {
    const std::string s = k.name.substr(0, k.name.find('.'));
    if (s != section) {
      if (!section.empty()) os << '\n';
      section = s;
    }
    os << k.name << " = " << k.get(config) << '\n';
  }
  return os.str();
}

}  // namespace prbfpn
