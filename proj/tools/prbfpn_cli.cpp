// SPDX-License-Identifier: Apache-2.0
//
// prbfpn: train / eval / ablate / gradcheck / export-graph.
#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "prbfpn/errors.hpp"
#include "prbfpn/harness.hpp"
#include "prbfpn/ops.hpp"

namespace {

using namespace prbfpn;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "run configuration (key = value lines)")->required();
  cmd->add_option("--seed", c.seed, "override train.seed");
  cmd->add_flag("--deterministic", c.deterministic, "force single-threaded end to end");
}

RunConfig load(const Common& c) {
  RunConfig cfg = load_run_config(c.config);
  if (c.seed) cfg.train.seed = *c.seed;
  if (c.deterministic) cfg.deterministic = true;
  cfg.validate();
  return cfg;
}

void print_metrics(const EvalResult& m) {
  std::printf("ap=%.6f\nap50=%.6f\nap75=%.6f\nap_s=%.6f\nap_m=%.6f\nap_l=%.6f\n", m.ap, m.ap50, m.ap75, m.ap_s,
              m.ap_m, m.ap_l);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parallel residual bi-fusion feature pyramid: toy detector harness"};
  app.require_subcommand(1);

  Common train_opts, eval_opts, ablate_opts, grad_opts, graph_opts;
  bool resume = false;
  std::string checkpoint;
  std::string graph_out;
  bool inject_fault = false;
  int probes = 20;

  auto* train_cmd = app.add_subcommand("train", "train a detector, writing checkpoints and train.log");
  add_common(train_cmd, train_opts);
  train_cmd->add_flag("--resume", resume, "continue from last.ckpt in paths.checkpoint_dir");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the val split");
  add_common(eval_cmd, eval_opts);
  eval_cmd->add_option("--checkpoint", checkpoint, "parameters to evaluate (default: untrained model)");

  auto* ablate_cmd = app.add_subcommand("ablate", "train and compare the four structural variants");
  add_common(ablate_cmd, ablate_opts);

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every block type");
  add_common(grad_cmd, grad_opts);
  grad_cmd->add_option("--probes", probes, "probes per block")->check(CLI::PositiveNumber);
  grad_cmd->add_flag("--inject-backward-fault", inject_fault, "corrupt the conv2d weight gradient");

  auto* graph_cmd = app.add_subcommand("export-graph", "write the model topology as Graphviz DOT");
  add_common(graph_cmd, graph_opts);
  graph_cmd->add_option("--output", graph_out, "DOT file (default: paths.output_dir/topology.dot)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      const RunConfig cfg = load(train_opts);
      const TrainResult r = train(cfg, TrainOptions{resume, &std::cerr});
      std::printf("final_checkpoint=%s\nfirst_loss=%.6f\nfinal_loss=%.6f\n", r.final_checkpoint.c_str(), r.first_loss,
                  r.final_loss);
      if (r.best_ap >= 0) std::printf("best_val_ap=%.6f\n", r.best_ap);
    } else if (*eval_cmd) {
      const RunConfig cfg = load(eval_opts);
      std::optional<std::filesystem::path> ckpt;
      if (!checkpoint.empty()) ckpt = checkpoint;
      const EvalOutcome o = evaluate_checkpoint(cfg, ckpt);
      print_metrics(o.metrics);
      std::printf("images=%zu\ndetections=%zu\nmean_forward_ms=%.3f\n", o.images, o.detections, o.mean_forward_ms);
    } else if (*ablate_cmd) {
      const RunConfig cfg = load(ablate_opts);
      std::cout << format_ablation(ablate(cfg, &std::cerr));
    } else if (*grad_cmd) {
      const RunConfig cfg = load(grad_opts);
      debug::set_backward_fault(inject_fault);
      GradcheckSettings s;
      s.probes = probes;
      const auto entries = gradcheck_suite(cfg, s);
      std::cout << format_gradcheck(entries);
      for (const auto& e : entries)
        if (!e.report.passed()) return static_cast<int>(ExitCode::kGradcheckFailed);
    } else if (*graph_cmd) {
      const RunConfig cfg = load(graph_opts);
      const std::filesystem::path out =
          graph_out.empty() ? cfg.paths.output_dir / "topology.dot" : std::filesystem::path(graph_out);
      if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
      std::ofstream(out) << export_graph(cfg);
      PrbFpnConfig mc = cfg.model;
      std::printf("topology=%s\nblock_count=%zu\n", out.c_str(), PrbFpnModel<float>(mc).block_count());
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(ExitCode::kFailure);
  }
  return 0;
}
