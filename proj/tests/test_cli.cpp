#include <doctest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>

#include "prbfpn/blocks.hpp"
#include "prbfpn/run_config.hpp"

using namespace prbfpn;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "prbfpn_cli_test";

struct Run {
  int status = -1;
  std::string out;
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(PRBFPN_CLI_PATH) + " " + args + " 2>/dev/null";
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  Run r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) r.out.append(buf, n);
  const int st = pclose(p);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

std::string write_config(const std::string& name, const std::string& extra = "", int c_fuse = 3) {
  fs::create_directories(kRoot);
  const fs::path p = kRoot / (name + ".cfg");
  std::ofstream(p) << "model.L = 3\nmodel.N = 2\nmodel.c_fuse = " << c_fuse << "\nmodel.c_head = 4\n"
                   << "data.image_side = 32\ndata.objects_max = 3\n"
                   << "data.size_tiny = 2-3\ndata.size_small = 4-6\ndata.size_medium = 7-10\ndata.size_large = 11-20\n"
                   << "data.train_count = 8\ndata.val_count = 4\ntrain.epochs = 1\ntrain.batch_size = 4\n"
                   << "paths.checkpoint_dir = " << (kRoot / name / "ckpt").string() << "\n"
                   << "paths.report_dir = " << (kRoot / name / "report").string() << "\n"
                   << "paths.output_dir = " << (kRoot / name / "out").string() << "\n"
                   << extra;
  return "--config " + p.string();
}

std::string value_of(const std::string& out, const std::string& key) {
  std::smatch m;
  if (std::regex_search(out, m, std::regex("(^|\n)" + key + "=([^\n]*)"))) return m[2];
  return "";
}

}  // namespace

TEST_CASE("config problems exit with code 2") {
  CHECK(cli("train --config /nonexistent.cfg").status == 2);
  CHECK(cli("train " + write_config("badkey", "model.unknown = 1\n")).status == 2);
  CHECK(cli("eval " + write_config("badval", "train.momentum = 1.5\n")).status == 2);
}

TEST_CASE("gradcheck passes, and fails with the injected fault") {
  const std::string cfg = write_config("grad");
  const Run ok = cli("gradcheck " + cfg);
  CHECK(ok.status == 0);
  CHECK(ok.out.find("conv2d") != std::string::npos);
  CHECK(ok.out.find("full_model") != std::string::npos);
  const Run bad = cli("gradcheck --inject-backward-fault " + cfg);
  CHECK(bad.status == 6);
}

TEST_CASE("exported graph has one node per block") {
  const std::string cfg = write_config("graph");
  const Run r = cli("export-graph " + cfg);
  REQUIRE(r.status == 0);
  std::ifstream dot(value_of(r.out, "topology"));
  REQUIRE(dot);
  std::size_t nodes = 0;
  for (std::string line; std::getline(dot, line);)
    if (line.find(" [label=") != std::string::npos && line.find("->") == std::string::npos) ++nodes;
  CHECK(std::to_string(nodes) == value_of(r.out, "block_count"));
  PrbFpnConfig m;
  m.L = 3;
  m.N = 2;
  m.c_fuse = 3;
  CHECK(nodes == PrbFpnModel<float>(m).block_count());
}

TEST_CASE("train, seed override, eval, mismatched checkpoint") {
  const std::string cfg = write_config("train");
  const Run t = cli("train --deterministic --seed 7 " + cfg);
  REQUIRE(t.status == 0);
  const std::string ckpt = value_of(t.out, "final_checkpoint");
  CHECK(fs::exists(ckpt));
  const RunConfig written = load_run_config(kRoot / "train" / "ckpt" / "run.cfg");
  CHECK(written.train.seed == 7);

  const Run e1 = cli("eval --seed 7 " + cfg + " --checkpoint " + ckpt);
  const Run e2 = cli("eval --seed 7 " + cfg + " --checkpoint " + ckpt);
  REQUIRE(e1.status == 0);
  CHECK(value_of(e1.out, "ap") == value_of(e2.out, "ap"));
  CHECK(value_of(e1.out, "images") == "4");

  CHECK(cli("eval " + write_config("wide", "", 4) + " --checkpoint " + ckpt).status == 5);
  CHECK(cli("train --resume " + write_config("fresh")).status == 2);  // nothing to resume
  fs::remove_all(kRoot);
}
