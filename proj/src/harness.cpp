// SPDX-License-Identifier: Apache-2.0
#include "prbfpn/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "prbfpn/checkpoint.hpp"
#include "prbfpn/errors.hpp"
#include "prbfpn/ops.hpp"
#include "prbfpn/rng.hpp"

namespace prbfpn {

namespace fs = std::filesystem;

template <typename T>
Detector<T>::Detector(const PrbFpnConfig& config, int num_classes, int priors_per_level)
    : fpn_(config), head_(config, num_classes, priors_per_level) {
  for (const auto& p : fpn_.parameters()) params_.push_back(p);
  for (const auto& p : head_.parameters()) params_.push_back(p);
  check_unique_names<T>(params_);
}

template <typename T>
std::vector<Tensor<T>> Detector<T>::forward(const Tensor<T>& images) const {
  const auto maps = fpn_.forward(images);
  return head_forward<T>(maps, head_);
}

template class Detector<float>;
template class Detector<double>;

std::vector<std::vector<Prior>> resolve_priors(const RunConfig& config) {
  if (!config.priors.empty()) return parse_priors(format_priors(parse_priors(config.priors)));
  const Dataset train_set(config.data, Split::kTrain, config.train_count);
  std::vector<GroundTruthBox> boxes;
  for (int i = 0; i < train_set.size(); ++i) {
    const auto b = train_set.boxes(i);
    boxes.insert(boxes.end(), b.begin(), b.end());
  }
  return parse_priors(format_priors(fit_priors(boxes, config.priors_per_level, config.model.N)));
}

namespace {

std::string hex(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

std::string fixed(double v, int digits = 6) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::optional<fs::path> cache_of(const RunConfig& c) {
  if (c.paths.cache_dir.empty()) return std::nullopt;
  return c.paths.cache_dir;
}

int data_workers(const RunConfig& c) { return c.deterministic ? 1 : c.train.workers; }

EvalConfig eval_config(const RunConfig& c) {
  const auto cut = c.data.bucket_cutoffs();
  EvalConfig e;
  e.num_classes = c.data.num_classes;
  e.small_max = cut[1];
  e.medium_max = cut[2];
  return e;
}

void save_state(const fs::path& path, std::span<const Parameter<float>> params, const Sgd<float>& sgd) {
  std::vector<CheckpointEntry> entries = to_entries<float>(params);
  for (std::size_t i = 0; i < entries.size(); ++i) entries[i].values = sgd.velocities()[i];
  write_checkpoint(path, entries);
}

void load_state(const fs::path& path, std::span<const Parameter<float>> params, Sgd<float>& sgd) {
  const auto entries = read_checkpoint(path);
  const auto want = to_entries<float>(params);
  if (entries.size() != want.size()) throw CheckpointMismatch("optimizer state " + path.string() + " does not match the model");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].name != want[i].name || entries[i].dims != want[i].dims) {
      throw CheckpointMismatch("optimizer state " + path.string() + " differs at parameter " + want[i].name);
    }
    sgd.velocities()[i] = entries[i].values;
  }
}

struct Meta {
  int epochs_done = 0;
  double best_ap = -1;
  double first_loss = 0;
  double last_loss = 0;
};

void write_meta(const fs::path& path, const Meta& m) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    out << "epochs_done=" << m.epochs_done << "\nbest_ap=" << hex(m.best_ap) << "\nfirst_loss=" << hex(m.first_loss)
        << "\nlast_loss=" << hex(m.last_loss) << "\n";
  }
  fs::rename(tmp, path);
}

Meta read_meta(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("nothing to resume: " + path.string() + " not found");
  Meta m;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string k = line.substr(0, eq);
    const std::string v = line.substr(eq + 1);
    if (k == "epochs_done") m.epochs_done = std::stoi(v);
    if (k == "best_ap") m.best_ap = std::strtod(v.c_str(), nullptr);
    if (k == "first_loss") m.first_loss = std::strtod(v.c_str(), nullptr);
    if (k == "last_loss") m.last_loss = std::strtod(v.c_str(), nullptr);
  }
  return m;
}

double lr_at(const TrainConfig& t, int epoch) {
  double lr = t.lr;
  for (int d : t.lr_decay_epochs)
    if (epoch >= d) lr *= 0.1;
  return lr;
}

}  // namespace

std::vector<ImageDetections> detect(const Detector<float>& model, const AnchorGrid& grid, const Dataset& data,
                                    const RunConfig& config) {
  std::vector<ImageDetections> out;
  out.reserve(static_cast<std::size_t>(data.size()));
  const int bs = config.train.batch_size;
  for (int b0 = 0; b0 < data.size(); b0 += bs) {
    std::vector<int> idx(static_cast<std::size_t>(std::min(bs, data.size() - b0)));
    std::iota(idx.begin(), idx.end(), b0);
    const auto samples = data.get_many(idx, data_workers(config));
    const auto raw = model.forward(stack_images(samples));
    for (int i = 0; i < static_cast<int>(idx.size()); ++i) {
      auto dets = nms(decode<float>(raw, grid, config.data.num_classes, config.eval.score_thresh, i),
                      config.eval.nms_iou);
      if (dets.size() > 100) dets.resize(100);
      out.push_back(std::move(dets));
    }
  }
  return out;
}

EvalOutcome evaluate_model(const Detector<float>& model, const RunConfig& config) {
  const Dataset val(config.data, Split::kVal, config.val_count, cache_of(config));
  const AnchorGrid grid = gen_anchors(config.model, config.data.image_side, resolve_priors(config));
  const auto dets = detect(model, grid, val, config);
  std::vector<ImageTruth> gts;
  for (int i = 0; i < val.size(); ++i) gts.push_back(val.boxes(i));
  EvalOutcome o;
  o.metrics = evaluate(dets, gts, eval_config(config));
  o.images = dets.size();
  for (const auto& d : dets) o.detections += d.size();
  return o;
}

TrainResult train(const RunConfig& input, const TrainOptions& options) {
  RunConfig cfg = input;
  cfg.model.seed = cfg.train.seed;
  cfg.validate();
  const auto priors = resolve_priors(cfg);
  cfg.priors = format_priors(priors);

  const fs::path dir = cfg.paths.checkpoint_dir;
  fs::create_directories(dir);
  {
    std::ofstream rc(dir / "run.cfg");
    rc << format_run_config(cfg);
  }

  Detector<float> model(cfg.model, cfg.data.num_classes, cfg.priors_per_level);
  Sgd<float> sgd(model.parameters());
  const AnchorGrid grid = gen_anchors(cfg.model, cfg.data.image_side, priors);
  const Dataset train_set(cfg.data, Split::kTrain, cfg.train_count, cache_of(cfg));
  const int K = cfg.data.num_classes;

  Meta meta;
  if (options.resume) {
    meta = read_meta(dir / "last.meta");
    load_parameters<float>(dir / "last.ckpt", model.parameters());
    load_state(dir / "last.state", model.parameters(), sgd);
  }
  std::ofstream log(dir / "train.log", options.resume ? std::ios::app : std::ios::trunc);
  if (!options.resume) {
    log << "kind=run params=" << count_scalars<float>(model.parameters()) << " anchors=" << grid.size()
        << " epochs=" << cfg.train.epochs << " batch_size=" << cfg.train.batch_size << "\n";
  }

  TrainResult result;
  result.first_loss = meta.first_loss;
  result.final_loss = meta.last_loss;
  result.best_ap = meta.best_ap;
  const int bs = cfg.train.batch_size;
  for (int e = meta.epochs_done; e < cfg.train.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at(cfg.train, e);
    const auto order = epoch_order(cfg.train_count, cfg.train.seed, e);
    LossBreakdown sum;
    int step = 0;
    for (int b0 = 0; b0 < cfg.train_count; b0 += bs, ++step) {
      const std::span<const int> idx(order.data() + b0, static_cast<std::size_t>(std::min(bs, cfg.train_count - b0)));
      const auto samples = train_set.get_many(idx, data_workers(cfg));
      std::vector<Assignment> assignments;
      std::vector<std::vector<GroundTruthBox>> gts;
      for (const auto& s : samples) {
        assignments.push_back(assign_targets(grid, s.boxes));
        gts.push_back(s.boxes);
      }
      Tape<float> tape;
      Tensor<float> loss;
      LossBreakdown bd;
      try {
        RecordingScope<float> scope(tape);
        const auto raw = model.forward(stack_images(samples));
        loss = compute_loss<float>(raw, grid, assignments, gts, K, {}, &bd);
      } catch (const NumericsError& err) {
        log << "kind=error epoch=" << e + 1 << " step=" << step + 1 << " message=\"" << err.what() << "\"\n";
        throw;
      }
      backward(tape, loss);
      sgd.step(model.parameters(), static_cast<float>(lr), static_cast<float>(cfg.train.momentum));
      const double w = static_cast<double>(idx.size());
      sum.total += bd.total * w;
      sum.box += bd.box * w;
      sum.obj += bd.obj * w;
      sum.cls += bd.cls * w;
      sum.positives += bd.positives;
      if ((step + 1) % 50 == 0) {
        log << "kind=step epoch=" << e + 1 << " step=" << step + 1 << " loss=" << fixed(bd.total) << "\n";
      }
    }
    EpochLog ep;
    ep.epoch = e + 1;
    ep.lr = lr;
    ep.loss = sum;
    ep.loss.total /= cfg.train_count;
    ep.loss.box /= cfg.train_count;
    ep.loss.obj /= cfg.train_count;
    ep.loss.cls /= cfg.train_count;
    if (e == 0) result.first_loss = ep.loss.total;
    result.final_loss = ep.loss.total;

    const bool val_now =
        cfg.train.val_every > 0 && ((e + 1) % cfg.train.val_every == 0 || e + 1 == cfg.train.epochs);
    if (val_now) ep.val_ap = evaluate_model(model, cfg).metrics.ap;

    save_parameters<float>(dir / "last.ckpt", model.parameters());
    save_state(dir / "last.state", model.parameters(), sgd);
    if (ep.val_ap && *ep.val_ap > result.best_ap) {
      result.best_ap = *ep.val_ap;
      save_parameters<float>(dir / "best.ckpt", model.parameters());
    }
    write_meta(dir / "last.meta", Meta{e + 1, result.best_ap, result.first_loss, result.final_loss});

    log << "kind=epoch epoch=" << ep.epoch << " lr=" << ep.lr << " loss=" << fixed(ep.loss.total)
        << " box=" << fixed(ep.loss.box) << " obj=" << fixed(ep.loss.obj) << " cls=" << fixed(ep.loss.cls)
        << " positives=" << ep.loss.positives;
    if (ep.val_ap) log << " val_ap=" << fixed(*ep.val_ap);
    log << "\n";
    log.flush();
    if (options.progress) {
      const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      *options.progress << "epoch " << ep.epoch << "/" << cfg.train.epochs << " loss " << fixed(ep.loss.total, 4)
                        << " (box " << fixed(ep.loss.box, 4) << " obj " << fixed(ep.loss.obj, 4) << " cls "
                        << fixed(ep.loss.cls, 4) << ")";
      if (ep.val_ap) *options.progress << " val_ap " << fixed(*ep.val_ap, 4);
      *options.progress << " [" << fixed(sec, 1) << " s]" << std::endl;
    }
    result.epochs.push_back(ep);
  }
  result.final_checkpoint = dir / "final.ckpt";
  save_parameters<float>(result.final_checkpoint, model.parameters());
  log << "kind=done epochs=" << cfg.train.epochs << " final_loss=" << fixed(result.final_loss) << "\n";
  return result;
}

EvalOutcome evaluate_checkpoint(const RunConfig& input, const std::optional<fs::path>& checkpoint, bool write_files,
                                bool time_forward) {
  RunConfig cfg = input;
  cfg.model.seed = cfg.train.seed;
  cfg.validate();
  Detector<float> model(cfg.model, cfg.data.num_classes, cfg.priors_per_level);
  if (checkpoint) load_parameters<float>(*checkpoint, model.parameters());
  EvalOutcome o = evaluate_model(model, cfg);

  if (time_forward) {
    const Dataset val(cfg.data, Split::kVal, cfg.val_count, cache_of(cfg));
    const int n = std::min(val.size(), 20);
    double ms = 0;
    for (int i = 0; i < n; ++i) {
      const Sample s = val.get(i);
      const auto t0 = std::chrono::steady_clock::now();
      (void)model.forward(s.image);
      ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    o.mean_forward_ms = ms / n;
  }
  if (write_files) {
    const fs::path dir = cfg.paths.report_dir;
    fs::create_directories(dir);
    write_report(dir / "eval_report.txt", o.metrics, eval_config(cfg), o.images);
    const Dataset val(cfg.data, Split::kVal, cfg.val_count, cache_of(cfg));
    const AnchorGrid grid = gen_anchors(cfg.model, cfg.data.image_side, resolve_priors(cfg));
    write_detections(dir / "detections.tsv", detect(model, grid, val, cfg));
    std::vector<ImageTruth> gts;
    for (int i = 0; i < val.size(); ++i) gts.push_back(val.boxes(i));
    write_ground_truth(dir / "ground_truth.tsv", gts);
    if (time_forward) {
      std::ofstream lat(dir / "latency.txt");
      lat << "mean_forward_ms=" << fixed(o.mean_forward_ms, 3) << "\n";
    }
  }
  return o;
}

const std::vector<AblationVariant>& ablation_variants() {
  static const std::vector<AblationVariant> v = {
      {"baseline", false, false, false},
      {"+Res", true, false, false},
      {"+Res+Par", true, true, false},
      {"+Res+Par+BFM", true, true, true},
  };
  return v;
}

namespace {

std::string dir_name(const std::string& variant) {
  std::string s;
  for (char c : variant) {
    if (c == '+') {
      if (!s.empty()) s += '_';
    } else {
      s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
  }
  return s;
}

}  // namespace

std::vector<AblationRun> ablate(const RunConfig& input, std::ostream* progress) {
  input.validate();
  std::vector<AblationRun> runs;
  for (int k = 0; k < input.ablate_seeds; ++k) {
    for (const auto& v : ablation_variants()) {
      RunConfig cfg = input;
      cfg.model.use_residual = v.residual;
      cfg.model.use_parallel = v.parallel;
      cfg.model.use_bfm = v.bfm;
      cfg.train.seed = input.train.seed + static_cast<std::uint64_t>(k);
      cfg.train.val_every = 0;
      cfg.paths.checkpoint_dir =
          input.paths.checkpoint_dir / "ablate" / (dir_name(v.name) + "_seed" + std::to_string(cfg.train.seed));
      if (progress) *progress << "== " << v.name << " seed " << cfg.train.seed << std::endl;
      const TrainResult tr = train(cfg, TrainOptions{false, progress});
      RunConfig ev = cfg;
      ev.model.seed = cfg.train.seed;
      Detector<float> model(ev.model, ev.data.num_classes, ev.priors_per_level);
      load_parameters<float>(tr.final_checkpoint, model.parameters());
      AblationRun run;
      run.variant = v.name;
      run.seed = cfg.train.seed;
      run.params = count_scalars<float>(model.parameters());
      run.metrics = evaluate_model(model, ev).metrics;
      run.first_loss = tr.first_loss;
      run.final_loss = tr.final_loss;
      if (progress) {
        *progress << "   ap " << fixed(run.metrics.ap, 4) << " ap_s " << fixed(run.metrics.ap_s, 4) << " ap_l "
                  << fixed(run.metrics.ap_l, 4) << std::endl;
      }
      runs.push_back(run);
    }
  }
  fs::create_directories(input.paths.report_dir);
  std::ofstream(input.paths.report_dir / "ablation.tsv") << format_ablation(runs);
  return runs;
}

std::string format_ablation(const std::vector<AblationRun>& runs) {
  std::ostringstream os;
  os << "variant\tseed\tparams\tap\tap50\tap75\tap_s\tap_m\tap_l\tfirst_loss\tfinal_loss\n";
  for (const auto& r : runs) {
    os << r.variant << '\t' << r.seed << '\t' << r.params;
    for (double m : {r.metrics.ap, r.metrics.ap50, r.metrics.ap75, r.metrics.ap_s, r.metrics.ap_m, r.metrics.ap_l})
      os << '\t' << fixed(m);
    os << '\t' << fixed(r.first_loss) << '\t' << fixed(r.final_loss) << '\n';
  }
  os << "\n# summary: mean +- sd over seeds\nvariant\tparams\tap\tap_s\tap_l\n";
  for (const auto& v : ablation_variants()) {
    std::vector<const AblationRun*> sel;
    for (const auto& r : runs)
      if (r.variant == v.name) sel.push_back(&r);
    if (sel.empty()) continue;
    auto stat = [&](auto get) {
      double mean = 0;
      for (const auto* r : sel) mean += get(*r);
      mean /= static_cast<double>(sel.size());
      double var = 0;
      for (const auto* r : sel) var += (get(*r) - mean) * (get(*r) - mean);
      const double sd = sel.size() > 1 ? std::sqrt(var / static_cast<double>(sel.size() - 1)) : 0.0;
      return fixed(mean, 4) + " +- " + fixed(sd, 4);
    };
    os << v.name << '\t' << sel[0]->params << '\t' << stat([](const AblationRun& r) { return r.metrics.ap; }) << '\t'
       << stat([](const AblationRun& r) { return r.metrics.ap_s; }) << '\t'
       << stat([](const AblationRun& r) { return r.metrics.ap_l; }) << '\n';
  }
  return os.str();
}

namespace {

Tensor<double> random_tensor(Shape s, CounterRng& rng, double lo = -1, double hi = 1) {
  std::vector<double> v(s.numel());
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(s, std::move(v));
}

Parameter<double> leaf(const std::string& name, Shape s, CounterRng& rng) {
  Parameter<double> p{name, random_tensor(s, rng), 4};
  p.tensor.set_requires_grad(true);
  return p;
}

class Suite {
 public:
  Suite(const GradcheckSettings& s, std::uint64_t seed) : settings_(s), rng_(seed, 0x67726164ULL) {}

  CounterRng& rng() { return rng_; }

  // Scalarises `fn` against fixed random weights so that no output
  // coordinate is summed symmetrically.
  void check(const std::string& name, std::vector<Parameter<double>> params,
             const std::function<Tensor<double>()>& fn, bool scalar = false) {
    std::function<Tensor<double>()> loss = fn;
    if (!scalar) {
      Tensor<double> weights = random_tensor(fn().shape(), rng_);
      loss = [fn, weights] { return sum(mul(fn(), weights)); };
    }
    entries_.push_back({name, finite_diff_check(loss, params, settings_.probes, settings_.step, settings_.tol,
                                                hash_combine(entries_.size(), 17))});
  }

  std::vector<GradcheckEntry> take() { return std::move(entries_); }

 private:
  GradcheckSettings settings_;
  CounterRng rng_;
  std::vector<GradcheckEntry> entries_;
};

std::vector<Parameter<double>> with_prefix(std::span<const Parameter<double>> params, const std::string& prefix) {
  std::vector<Parameter<double>> out;
  for (const auto& p : params)
    if (p.name.rfind(prefix, 0) == 0) out.push_back(p);
  return out;
}

// Zero and identity starts (skip projections, bfm fuse) leave gradient paths
// idle at init; the checks need every path live, so those get a Glorot draw.
void liven(std::span<Parameter<double>> params, std::uint64_t seed) {
  for (auto& p : params) {
    const bool skip = p.name.ends_with(".skip.weight");
    const bool bfm_fuse = p.name.starts_with("bfm.") && p.name.ends_with(".fuse.weight");
    if (!skip && !bfm_fuse) continue;
    const Shape s = p.tensor.shape();
    const auto fresh = make_filter<double>(p.name + ".gradcheck", s.n, s.c, s.h, seed);
    std::copy(fresh.tensor.data().begin(), fresh.tensor.data().end(), p.tensor.mutable_data().begin());
  }
}

std::vector<std::vector<Prior>> synthetic_priors(const PrbFpnConfig& c, int per_level) {
  std::vector<std::vector<Prior>> pr;
  for (int s = 1; s <= c.N; ++s) {
    const double stride = 1 << (prediction_level(s, c.L) - 1);
    std::vector<Prior> m;
    for (int a = 0; a < per_level; ++a) m.push_back(Prior{stride * (1.5 + a), stride * (1.0 + 0.75 * a)});
    pr.push_back(m);
  }
  return pr;
}

std::vector<GroundTruthBox> random_boxes(CounterRng& rng, int side, int count, int classes) {
  std::vector<GroundTruthBox> out;
  for (int i = 0; i < count; ++i) {
    const double w = rng.uniform(2, side / 2.0);
    const double h = rng.uniform(2, side / 2.0);
    out.push_back(GroundTruthBox{Box{rng.uniform(w / 2, side - w / 2), rng.uniform(h / 2, side - h / 2), w, h},
                                 rng.uniform_int(0, classes - 1)});
  }
  return out;
}

}  // namespace

std::vector<GradcheckEntry> gradcheck_suite(const RunConfig& config, const GradcheckSettings& settings) {
  Suite suite(settings, config.train.seed);
  auto& rng = suite.rng();

  {
    auto x = leaf("x", {2, 3, 5, 5}, rng), w = leaf("w", {4, 3, 3, 3}, rng), b = leaf("b", {1, 4, 1, 1}, rng);
    suite.check("conv2d", {x, w, b}, [=] { return conv2d(x.tensor, w.tensor, b.tensor, 2, 1); });
  }
  {
    auto x = leaf("x", {2, 4, 3, 3}, rng), w = leaf("w", {3, 4, 1, 1}, rng), b = leaf("b", {1, 3, 1, 1}, rng);
    suite.check("pointwise_conv", {x, w, b}, [=] { return pointwise_conv(x.tensor, w.tensor, b.tensor); });
  }
  {
    auto x = leaf("x", {2, 3, 4, 4}, rng), w = leaf("w", {1, 3, 1, 1}, rng), b = leaf("b", {1, 3, 1, 1}, rng);
    suite.check("depthwise_scale", {x, w, b}, [=] { return depthwise_scale(x.tensor, w.tensor, b.tensor); });
  }
  {
    auto x = leaf("x", {1, 2, 4, 4}, rng);
    suite.check("space_to_depth", {x}, [=] { return space_to_depth(x.tensor, 2); });
  }
  {
    auto x = leaf("x", {1, 2, 3, 3}, rng);
    suite.check("upsample2x", {x}, [=] { return upsample2x(x.tensor); });
  }
  {
    auto x = leaf("x", {1, 3, 4, 4}, rng);
    suite.check("downsample2x", {x}, [=] { return downsample2x(x.tensor); });
  }
  {
    auto a = leaf("a", {1, 1, 3, 3}, rng), b = leaf("b", {1, 2, 3, 3}, rng), c = leaf("c", {1, 3, 3, 3}, rng);
    suite.check("concat_channels", {a, b, c}, [=] {
      const std::vector<Tensor<double>> in{a.tensor, b.tensor, c.tensor};
      return concat_channels<double>(in);
    });
  }
  {
    auto a = leaf("a", {1, 2, 3, 3}, rng), b = leaf("b", {1, 2, 3, 3}, rng);
    suite.check("add_leaky_relu", {a, b}, [=] { return leaky_relu(add(a.tensor, b.tensor)); });
    suite.check("mul", {a, b}, [=] { return mul(a.tensor, b.tensor); });
  }

  const PrbFpnConfig& mc = config.model;
  const int c = mc.c_fuse;
  const int side = 1 << mc.L;  // level L is 2x2
  auto map_at = [&](const std::string& name, int level, int channels) {
    return leaf(name, {1, channels, side >> (level - 1), side >> (level - 1)}, rng);
  };
  {
    std::vector<Parameter<double>> ps;
    const auto block = make_core_block<double>(ps, "core", 2, true, true, true, c, mc.seed);
    auto sh = map_at("shallow", 1, c), cu = map_at("current", 2, c), de = map_at("deep", 3, c);
    std::vector<Parameter<double>> reorg_ps = with_prefix(ps, "core.reorg");
    reorg_ps.push_back(sh);
    suite.check("reorg", reorg_ps, [=] { return reorg_forward(FeatureMap<double>{sh.tensor, 1}, block); });
    std::vector<Parameter<double>> all = ps;
    all.insert(all.end(), {sh, cu, de});
    suite.check("core", all, [=] {
      const FeatureMap<double> s{sh.tensor, 1}, m{cu.tensor, 2}, d{de.tensor, 3};
      return core_forward(&s, &m, &d, block).tensor;
    });
  }
  {
    std::vector<Parameter<double>> ps;
    const auto block = make_recore_block<double>(ps, "recore", 2, true, true, true, true, c, mc.seed);
    liven(ps, mc.seed);
    auto sh = map_at("shallow", 1, c), cu = map_at("current", 2, c), de = map_at("deep", 3, c);
    auto sk = map_at("skip", 3, c);
    ps.insert(ps.end(), {sh, cu, de, sk});
    suite.check("recore", ps, [=] {
      const FeatureMap<double> s{sh.tensor, 1}, m{cu.tensor, 2}, d{de.tensor, 3}, k{sk.tensor, 3};
      return recore_forward(&s, &m, &d, &k, block).tensor;
    });
  }

  PrbFpnConfig full = mc;
  full.use_residual = full.use_parallel = full.use_bfm = true;
  const int K = config.data.num_classes;
  const int A = config.priors_per_level;
  {
    PrbFpnModel<double> model(full);
    liven(model.parameters(), mc.seed);
    std::vector<Parameter<double>> inputs;
    for (int s = 1; s <= full.N; ++s)
      inputs.push_back(map_at("map" + std::to_string(s), prediction_level(s, full.L), full.c_head));
    if (model.bfm()) {
      std::vector<Parameter<double>> ps = with_prefix(model.parameters(), "bfm.");
      ps.insert(ps.end(), inputs.begin(), inputs.end());
      const auto& bfm = *model.bfm();
      const int L = full.L;
      std::vector<Tensor<double>> weights;
      for (const auto& in : inputs) weights.push_back(random_tensor(in.tensor.shape(), rng));
      suite.check(
          "bfm", ps,
          [=, &bfm] {
            std::vector<FeatureMap<double>> maps;
            for (std::size_t s = 0; s < inputs.size(); ++s)
              maps.push_back({inputs[s].tensor, prediction_level(static_cast<int>(s) + 1, L)});
            const auto out = bfm_forward<double>(maps, bfm);
            Tensor<double> total;
            for (std::size_t s = 0; s < out.size(); ++s) {
              const Tensor<double> term = sum(mul(out[s].tensor, weights[s]));
              total = total.defined() ? add(total, term) : term;
            }
            return total;
          },
          true);
    }

    DetectionHead<double> head(full, K, A);
    const auto priors = synthetic_priors(full, A);
    const AnchorGrid grid = gen_anchors(full, side, priors);
    const std::vector<std::vector<GroundTruthBox>> gts{random_boxes(rng, side, 3, K)};
    const std::vector<Assignment> asg{assign_targets(grid, gts[0])};
    std::vector<Parameter<double>> ps(head.parameters().begin(), head.parameters().end());
    ps.insert(ps.end(), inputs.begin(), inputs.end());
    const int L = full.L;
    suite.check(
        "head_loss", ps,
        [=, &head] {
          std::vector<FeatureMap<double>> maps;
          for (std::size_t s = 0; s < inputs.size(); ++s)
            maps.push_back({inputs[s].tensor, prediction_level(static_cast<int>(s) + 1, L)});
          const auto raw = head_forward<double>(maps, head);
          return compute_loss<double>(raw, grid, asg, gts, K);
        },
        true);
  }
  {
    Detector<double> det(full, K, A);
    liven(det.parameters(), mc.seed);
    const auto priors = synthetic_priors(full, A);
    const AnchorGrid grid = gen_anchors(full, side, priors);
    const std::vector<std::vector<GroundTruthBox>> gts{random_boxes(rng, side, 4, K)};
    const std::vector<Assignment> asg{assign_targets(grid, gts[0])};
    Tensor<double> image = random_tensor({1, 3, side, side}, rng, 0, 1);
    std::vector<Parameter<double>> ps(det.parameters().begin(), det.parameters().end());
    suite.check(
        "full_model", ps,
        [=, &det] {
          const auto raw = det.forward(image);
          return compute_loss<double>(raw, grid, asg, gts, K);
        },
        true);
  }
  return suite.take();
}

std::string format_gradcheck(const std::vector<GradcheckEntry>& entries) {
  std::ostringstream os;
  char buf[160];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof buf, "block=%s probes=%zu failures=%zu max_rel_error=%.3e passed=%d\n", e.block.c_str(),
                  e.report.probes.size(), e.report.failures(), e.report.max_rel_error(), e.report.passed() ? 1 : 0);
    os << buf;
  }
  return os.str();
}

std::string export_graph(const RunConfig& config) {
  PrbFpnConfig mc = config.model;
  mc.seed = config.train.seed;
  return export_topology(PrbFpnModel<float>(mc));
}

}  // namespace prbfpn
