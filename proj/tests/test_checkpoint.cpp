#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "prbfpn/blocks.hpp"
#include "prbfpn/checkpoint.hpp"

using namespace prbfpn;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "prbfpn_ckpt_test";
  fs::create_directories(dir);
  return dir / name;
}

std::string bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

PrbFpnConfig small(bool residual = true) {
  PrbFpnConfig c;
  c.L = 3;
  c.N = 2;
  c.c_fuse = 2;
  c.c_head = 3;
  c.use_residual = residual;
  return c;
}

}  // namespace

TEST_CASE("byte layout of a one-entry file") {
  const std::vector<CheckpointEntry> e{{"ab", {2, 1}, {1.0f, -2.5f}}};
  const auto p = scratch("layout.ckpt");
  write_checkpoint(p, e);
  const std::string b = bytes(p);
  std::string expect("PRBF", 4);
  auto u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) expect.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  u32(1);
  u32(1);
  expect += std::string("\x02\x00", 2) + "ab" + "\x02";
  u32(2);
  u32(1);
  for (float f : {1.0f, -2.5f}) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    u32(bits);
  }
  CHECK(b == expect);
  CHECK_FALSE(fs::exists(p.string() + ".tmp"));
}

TEST_CASE("parameters round trip bitwise") {
  PrbFpnModel<float> a(small());
  PrbFpnConfig other = small();
  other.seed = 99;
  PrbFpnModel<float> b(other);
  const auto p = scratch("model.ckpt");
  save_parameters<float>(p, a.parameters());
  load_parameters<float>(p, b.parameters());
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const auto& x = a.parameters()[i].tensor;
    CHECK(std::memcmp(x.data().data(), b.parameters()[i].tensor.data().data(), x.numel() * 4) == 0);
  }
  const auto entries = read_checkpoint(p);
  CHECK(entries.size() == a.parameters().size());
  CHECK(entries[0].name == "backbone.level1.weight");

  PrbFpnModel<double> d(small());
  load_parameters<double>(p, d.parameters());
  CHECK(static_cast<float>(d.parameters()[3].tensor.data()[0]) == a.parameters()[3].tensor.data()[0]);
}

TEST_CASE("mismatch lists every differing name and has its own exit code") {
  PrbFpnModel<float> with_skip(small(true)), without(small(false));
  const auto p = scratch("skip.ckpt");
  save_parameters<float>(p, with_skip.parameters());
  try {
    load_parameters<float>(p, without.parameters());
    FAIL("expected CheckpointMismatch");
  } catch (const CheckpointMismatch& e) {
    const std::string m = e.what();
    CHECK(m.find("path1.core2.skip.weight") != std::string::npos);
    CHECK(m.find("path2.core2.skip.bias") != std::string::npos);
    CHECK(e.exit_code() == ExitCode::kCheckpointMismatch);
  }
  PrbFpnConfig wide = small();
  wide.c_fuse = 3;
  PrbFpnModel<float> w(wide);
  CHECK_THROWS_AS(load_parameters<float>(p, w.parameters()), CheckpointMismatch);
  CHECK_THROWS_AS(load_parameters<float>(p, w.parameters()), ConfigError);
}

TEST_CASE("corrupt files are rejected") {
  const auto p = scratch("bad.ckpt");
  std::ofstream(p, std::ios::binary) << "NOPE";
  CHECK_THROWS_AS(read_checkpoint(p), CheckpointMismatch);
  const std::vector<CheckpointEntry> e{{"x", {3}, {1, 2, 3}}};
  write_checkpoint(p, e);
  std::string b = bytes(p);
  std::ofstream(p, std::ios::binary | std::ios::trunc) << b.substr(0, b.size() - 2);
  CHECK_THROWS_AS(read_checkpoint(p), CheckpointMismatch);
  std::ofstream(p, std::ios::binary | std::ios::trunc) << b << "x";
  CHECK_THROWS_AS(read_checkpoint(p), CheckpointMismatch);
  CHECK_THROWS_AS(read_checkpoint(scratch("missing.ckpt")), CheckpointMismatch);
  fs::remove_all(p.parent_path());
}
