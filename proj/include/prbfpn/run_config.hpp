// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: UTF-8 text, one `section.key = value` per line, '#'
// starts a comment. Every key is optional; unknown or repeated keys are
// rejected. See README.md for the key table.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "prbfpn/blocks.hpp"
#include "prbfpn/scenes.hpp"

namespace prbfpn {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 8;
  double lr = 0.01;
  double momentum = 0.9;
  std::vector<int> lr_decay_epochs;  // lr *= 0.1 from each listed epoch (0-based) on
  std::uint64_t seed = 1;            // parameter init and shuffling
  int val_every = 1;                 // epochs between val evaluations, 0 = final only
  int workers = 1;                   // data generation threads outside deterministic mode
};

struct EvalSettings {
  double score_thresh = 0.05;
  double nms_iou = 0.5;
};

struct PathsConfig {
  std::filesystem::path checkpoint_dir = "runs/checkpoints";
  std::filesystem::path report_dir = "runs/reports";
  std::filesystem::path output_dir = "runs/output";
  std::filesystem::path cache_dir;  // empty = no sample cache
};

struct RunConfig {
  PrbFpnConfig model;
  int priors_per_level = 2;
  std::string priors;  // format_priors text; empty = fit to the train split
  SceneConfig data;    // data.num_classes is also the head's class count
  int train_count = 2000;
  int val_count = 500;
  TrainConfig train;
  EvalSettings eval;
  PathsConfig paths;
  int ablate_seeds = 3;
  bool deterministic = true;

  /// Throws ConfigError.
  void validate() const;
};

/// Throws ConfigError naming the line for syntax errors, unknown keys,
/// repeated keys and bad values. The result is validated.
RunConfig parse_run_config(const std::string& text, const std::string& origin = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);
/// Canonical text form; parse_run_config(format_run_config(c)) == c.
std::string format_run_config(const RunConfig& config);

}  // namespace prbfpn
