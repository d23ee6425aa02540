// SPDX-License-Identifier: Apache-2.0
//
// Commands behind the CLI: training with resumable checkpoints, evaluation,
// the structural ablation, the gradient-check suite and topology export.
#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "prbfpn/evaluation.hpp"
#include "prbfpn/gradcheck.hpp"
#include "prbfpn/head.hpp"
#include "prbfpn/run_config.hpp"

namespace prbfpn {

/// Feature pyramid plus detection head, with one flat parameter list.
template <typename T>
class Detector {
 public:
  Detector(const PrbFpnConfig& config, int num_classes, int priors_per_level);

  const PrbFpnModel<T>& fpn() const { return fpn_; }
  const DetectionHead<T>& head() const { return head_; }
  std::span<Parameter<T>> parameters() { return params_; }
  std::span<const Parameter<T>> parameters() const { return params_; }
  /// Raw head outputs, one tensor per prediction map (coarse first).
  std::vector<Tensor<T>> forward(const Tensor<T>& images) const;

 private:
  PrbFpnModel<T> fpn_;
  DetectionHead<T> head_;
  std::vector<Parameter<T>> params_;  // shares storage with fpn_ and head_
};

/// Priors from the config, or fitted to the train split when none are given.
/// Either way they pass through their text form, so a run and a later
/// evaluation from the written config see identical values.
std::vector<std::vector<Prior>> resolve_priors(const RunConfig& config);

struct EpochLog {
  int epoch = 0;  // 1-based
  double lr = 0;
  LossBreakdown loss;
  std::optional<double> val_ap;
};

struct TrainResult {
  std::vector<EpochLog> epochs;  // epochs run by this invocation
  double first_loss = 0;         // epoch 1 mean loss, carried across resumes
  double final_loss = 0;
  double best_ap = -1;
  std::filesystem::path final_checkpoint;
};

struct TrainOptions {
  bool resume = false;
  std::ostream* progress = nullptr;
};

/// Files in paths.checkpoint_dir: run.cfg (resolved config), train.log,
/// last.ckpt / last.state / last.meta after every epoch, best.ckpt by val AP,
/// final.ckpt. With epochs = 0 the initial parameters are written as final.
TrainResult train(const RunConfig& config, const TrainOptions& options = {});

struct EvalOutcome {
  EvalResult metrics;
  std::size_t images = 0;
  std::size_t detections = 0;
  double mean_forward_ms = 0;
};

/// Runs decode, NMS and evaluation on the val split. Without a checkpoint the
/// freshly initialised model is evaluated.
std::vector<ImageDetections> detect(const Detector<float>& model, const AnchorGrid& grid, const Dataset& data,
                                    const RunConfig& config);
EvalOutcome evaluate_model(const Detector<float>& model, const RunConfig& config);
/// Also writes eval_report.txt, detections.tsv and ground_truth.tsv to
/// paths.report_dir, and latency.txt with the raw forward timing.
EvalOutcome evaluate_checkpoint(const RunConfig& config, const std::optional<std::filesystem::path>& checkpoint,
                                bool write_files = true, bool time_forward = true);

struct AblationVariant {
  std::string name;
  bool residual = false;
  bool parallel = false;
  bool bfm = false;
};

/// baseline, +Residual, +Residual+Parallel, +Residual+Parallel+BFM.
const std::vector<AblationVariant>& ablation_variants();

struct AblationRun {
  std::string variant;
  std::uint64_t seed = 0;
  std::size_t params = 0;
  EvalResult metrics;
  double first_loss = 0;
  double final_loss = 0;
};

/// Trains every variant for seeds train.seed .. train.seed + ablate.seeds - 1
/// on the same data and evaluates the final parameters. Writes
/// paths.report_dir/ablation.tsv.
std::vector<AblationRun> ablate(const RunConfig& config, std::ostream* progress = nullptr);
std::string format_ablation(const std::vector<AblationRun>& runs);

struct GradcheckEntry {
  std::string block;
  GradcheckReport report;
};

struct GradcheckSettings {
  int probes = 20;
  double step = 1e-6;
  double tol = 1e-4;
};

/// Finite-difference checks in double precision over every operator and
/// every block type of the configured model, plus the full model with head
/// and loss.
std::vector<GradcheckEntry> gradcheck_suite(const RunConfig& config, const GradcheckSettings& settings = {});
std::string format_gradcheck(const std::vector<GradcheckEntry>& entries);

std::string export_graph(const RunConfig& config);

}  // namespace prbfpn
