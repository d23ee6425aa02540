#include <doctest.h>

#include "prbfpn/run_config.hpp"

using namespace prbfpn;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_run_config(text, "t.cfg");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("defaults parse from an empty file") {
  const RunConfig c = parse_run_config("# nothing here\n\n");
  CHECK(c.model.L == 5);
  CHECK(c.model.N == 3);
  CHECK(c.data.image_side == 128);
  CHECK(c.train.epochs == 10);
  CHECK(c.priors.empty());
  CHECK(c.deterministic);
}

TEST_CASE("every key is read") {
  const std::string text = R"(
model.L = 4          # trailing comment
model.N = 2
model.c_fuse = 6
model.c_head = 12
model.use_residual = false
model.use_parallel = 0
model.use_bfm = true
model.priors_per_level = 1
model.priors = 20:20;6:6
data.image_side = 64
data.num_classes = 2
data.objects_min = 0
data.objects_max = 3
data.size_tiny = 3-5
data.size_small = 6-9
data.size_medium = 10-20
data.size_large = 21-40
data.weight_tiny = 0.1
data.weight_small = 0.2
data.weight_medium = 0.3
data.weight_large = 0.4
data.noise_std = 0.05
data.seed = 12345678901
data.train_count = 300
data.val_count = 40
train.epochs = 7
train.batch_size = 4
train.lr = 0.02
train.momentum = 0.8
train.lr_decay_epochs = 3, 5
train.seed = 9
train.val_every = 2
train.workers = 3
train.deterministic = false
eval.score_thresh = 0.1
eval.nms_iou = 0.45
paths.checkpoint_dir = /tmp/a b
paths.report_dir = r
paths.output_dir = o
paths.cache_dir = c
ablate.seeds = 2
)";
  const RunConfig c = parse_run_config(text);
  CHECK(c.model.L == 4);
  CHECK(c.model.N == 2);
  CHECK(c.model.c_fuse == 6);
  CHECK(c.model.c_head == 12);
  CHECK_FALSE(c.model.use_residual);
  CHECK_FALSE(c.model.use_parallel);
  CHECK(c.model.use_bfm);
  CHECK(c.model.seed == 9);
  CHECK(c.priors_per_level == 1);
  CHECK(c.priors == "20:20;6:6");
  CHECK(c.data.image_side == 64);
  CHECK(c.data.num_classes == 2);
  CHECK(c.data.objects_min == 0);
  CHECK(c.data.buckets[2].lo == 10);
  CHECK(c.data.buckets[3].hi == 40);
  CHECK(c.data.weights[3] == 0.4);
  CHECK(c.data.noise_std == 0.05);
  CHECK(c.data.seed == 12345678901ULL);
  CHECK(c.train_count == 300);
  CHECK(c.val_count == 40);
  CHECK(c.train.epochs == 7);
  CHECK(c.train.batch_size == 4);
  CHECK(c.train.lr == 0.02);
  CHECK(c.train.momentum == 0.8);
  CHECK(c.train.lr_decay_epochs == std::vector<int>{3, 5});
  CHECK(c.train.val_every == 2);
  CHECK(c.train.workers == 3);
  CHECK_FALSE(c.deterministic);
  CHECK(c.eval.score_thresh == 0.1);
  CHECK(c.eval.nms_iou == 0.45);
  CHECK(c.paths.checkpoint_dir == "/tmp/a b");
  CHECK(c.paths.cache_dir == "c");
  CHECK(c.ablate_seeds == 2);

  const std::string canon = format_run_config(c);
  const RunConfig d = parse_run_config(canon);
  CHECK(format_run_config(d) == canon);
  CHECK(d.train.lr == c.train.lr);
  CHECK(d.data.weights == c.data.weights);
}

TEST_CASE("reals are written in their shortest exact form") {
  RunConfig c;
  c.train.lr = 0.1 + 0.2;
  const RunConfig d = parse_run_config(format_run_config(c));
  CHECK(d.train.lr == c.train.lr);
  CHECK(format_run_config(RunConfig{}).find("train.lr = 0.01\n") != std::string::npos);
}

TEST_CASE("errors name the line") {
  CHECK(error_of("model.L = 5\nmodel.bogus = 1\n").find("t.cfg:2: unknown key 'model.bogus'") != std::string::npos);
  CHECK(error_of("model.N = 2\nmodel.N = 3\n").find("t.cfg:2: key 'model.N' given twice") != std::string::npos);
  CHECK(error_of("\n\nmodel.N = three\n").find("t.cfg:3:") != std::string::npos);
  CHECK(error_of("model.use_bfm = yes\n").find("true or false") != std::string::npos);
  CHECK(error_of("just text\n").find("expected key = value") != std::string::npos);
  CHECK(error_of("data.size_small = 8\n").find("lo-hi") != std::string::npos);
}

TEST_CASE("validation runs before any compute") {
  CHECK_FALSE(error_of("model.L = 4\nmodel.N = 3\n").empty());
  CHECK_FALSE(error_of("data.image_side = 100\n").empty());  // not divisible by 16
  CHECK_FALSE(error_of("data.weight_tiny = 0.5\n").empty());
  CHECK_FALSE(error_of("model.priors = 1:1;2:2\n").empty());  // two maps for N = 3
  CHECK_FALSE(error_of("model.priors = 1:1;2:2;3:3\n").empty());  // one prior, two per level
  CHECK_FALSE(error_of("train.momentum = 1\n").empty());
  CHECK_FALSE(error_of("eval.nms_iou = 0\n").empty());
  CHECK_FALSE(error_of("train.batch_size = 0\n").empty());
  CHECK(error_of("model.priors = 1:1 2:2;3:3 4:4;5:5 6:6\n").empty());
}

TEST_CASE("missing file is a config error") {
  CHECK_THROWS_AS(load_run_config("/nonexistent/run.cfg"), ConfigError);
}
