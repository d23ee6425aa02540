#include <doctest.h>

#include <set>

#include "prbfpn/blocks.hpp"
#include "prbfpn/gradcheck.hpp"
#include "prbfpn/harness.hpp"
#include "prbfpn/ops.hpp"
#include "test_util.hpp"

using namespace prbfpn;

namespace {

RunConfig small_config() {
  RunConfig c;
  c.model.L = 4;
  c.model.N = 2;
  c.model.c_fuse = 3;
  c.model.c_head = 4;
  c.data.num_classes = 2;
  c.priors_per_level = 2;
  return c;
}

}  // namespace

TEST_CASE("every operator and block passes at double precision") {
  const auto entries = gradcheck_suite(small_config());
  std::set<std::string> names;
  for (const auto& e : entries) {
    INFO(e.block, " max_rel_error=", e.report.max_rel_error());
    names.insert(e.block);
    CHECK(e.report.probes.size() == 20);
    CHECK(e.report.passed());
  }
  for (const char* n : {"conv2d", "pointwise_conv", "depthwise_scale", "space_to_depth", "upsample2x",
                        "downsample2x", "concat_channels", "add_leaky_relu", "mul", "reorg", "core", "recore",
                        "bfm", "head_loss", "full_model"})
    CHECK(names.count(n) == 1);
}

TEST_CASE("the suite flags an injected conv backward fault") {
  debug::set_backward_fault(true);
  const auto entries = gradcheck_suite(small_config());
  debug::set_backward_fault(false);
  bool conv_failed = false;
  for (const auto& e : entries)
    if (e.block == "conv2d") conv_failed = !e.report.passed();
  CHECK(conv_failed);
}

TEST_CASE("Re-CORE block with step 1e-4 over 20 probes") {
  std::vector<Parameter<double>> ps;
  const auto block = make_recore_block<double>(ps, "b", 2, true, true, true, true, 4, 5);
  std::vector<Parameter<double>> inputs;
  const int side = 16;
  const std::pair<const char*, int> maps[] = {{"s", 1}, {"c", 2}, {"d", 3}, {"k", 3}};
  for (std::size_t i = 0; i < 4; ++i) {
    const int sd = side >> (maps[i].second - 1);
    inputs.push_back({maps[i].first, testutil::random_tensor<double>({1, 4, sd, sd}, 100 + i, -1, 1, true), 4});
  }
  const auto weights = testutil::random_tensor<double>({1, 4, 8, 8}, 200);
  ps.insert(ps.end(), inputs.begin(), inputs.end());
  auto loss = [&] {
    const FeatureMap<double> s{inputs[0].tensor, 1}, c{inputs[1].tensor, 2}, d{inputs[2].tensor, 3},
        k{inputs[3].tensor, 3};
    return sum(mul(recore_forward(&s, &c, &d, &k, block).tensor, weights));
  };
  const auto r = finite_diff_check(loss, ps, 20, 1e-4, 1e-4);
  INFO("max_rel_error=", r.max_rel_error());
  CHECK(r.passed());
}

TEST_CASE("concat_channels backward splits at channel boundaries") {
  std::vector<Parameter<double>> ps;
  for (int i = 0; i < 3; ++i)
    ps.push_back({"x" + std::to_string(i), testutil::random_tensor<double>({2, i + 1, 3, 3}, 300 + i, -1, 1, true), 4});
  const auto w = testutil::random_tensor<double>({2, 6, 3, 3}, 310);
  auto loss = [&] {
    const std::vector<Tensor<double>> in{ps[0].tensor, ps[1].tensor, ps[2].tensor};
    return sum(mul(concat_channels<double>(in), w));
  };
  CHECK(finite_diff_check(loss, ps, 20, 1e-6, 1e-4).passed());
}

TEST_CASE("add then leaky_relu jointly") {
  std::vector<Parameter<double>> ps{{"a", testutil::random_tensor<double>({1, 3, 4, 4}, 400, -1, 1, true), 4},
                                    {"b", testutil::random_tensor<double>({1, 3, 4, 4}, 401, -1, 1, true), 4}};
  const auto w = testutil::random_tensor<double>({1, 3, 4, 4}, 402);
  auto loss = [&] { return sum(mul(leaky_relu(add(ps[0].tensor, ps[1].tensor)), w)); };
  CHECK(finite_diff_check(loss, ps, 20, 1e-6, 1e-4).passed());
}
