#include <doctest.h>

#include <cmath>
#include <cstdint>

#include "prbfpn/gradcheck.hpp"
#include "prbfpn/ops.hpp"
#include "prbfpn/optim.hpp"
#include "prbfpn/tensor.hpp"
#include "test_util.hpp"

using namespace prbfpn;

TEST_CASE("tensor storage and grad slot") {
  Tensor<float> t(Shape{2, 3, 4, 5}, 1.5f);
  CHECK(t.numel() == 120);
  CHECK(t.at(1, 2, 3, 4) == 1.5f);
  CHECK(t.offset(1, 0, 0, 0) == 60);
  CHECK_FALSE(t.has_grad());
  auto g = t.grad_mut();
  CHECK(g.size() == t.numel());
  for (float v : g) CHECK(v == 0.0f);
  CHECK_THROWS_AS(Tensor<float>(Shape{1, 0, 2, 2}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>(Shape{1, 1, 2, 2}, std::vector<float>(3)), ShapeError);
  CHECK_THROWS_AS(t.item(), ContractError);
}

TEST_CASE("storage is 64-byte aligned, so kernels do not depend on placement") {
  for (int n : {1, 3, 17, 1000}) {
    const Tensor<float> t(Shape{1, 1, 1, n}, 1.0f);
    CHECK(reinterpret_cast<std::uintptr_t>(t.data().data()) % 64 == 0);
    CHECK(reinterpret_cast<std::uintptr_t>(t.grad_mut().data()) % 64 == 0);
    CHECK(reinterpret_cast<std::uintptr_t>(t.detach_copy().data().data()) % 64 == 0);
  }
}

TEST_CASE("detach_copy is a deep copy without history") {
  Tensor<double> a(Shape{1, 1, 1, 2}, std::vector<double>{1, 2});
  a.set_requires_grad(true);
  a.grad_mut()[0] = 3;
  Tensor<double> b = a.detach_copy();
  CHECK_FALSE(b.same(a));
  CHECK_FALSE(b.has_grad());
  b.mutable_data()[0] = 9;
  CHECK(a.data()[0] == 1);
}

TEST_CASE("ops run forward only without a tape") {
  Tensor<double> x = testutil::random_tensor<double>({1, 2, 2, 2}, 1, -1, 1, true);
  Tape<double> tape;
  Tensor<double> y = sum(x);
  CHECK(tape.size() == 0);
  {
    RecordingScope<double> scope(tape);
    Tensor<double> z = sum(x);
    Tensor<double> c(Shape{1, 1, 1, 1}, 2.0);
    Tensor<double> w = sum(c);  // no input requires a gradient
    CHECK(tape.size() == 1);
  }
  CHECK(active_tape<double>() == nullptr);
}

TEST_CASE("backward of sum(x) is all ones") {
  Tensor<double> x = testutil::random_tensor<double>({2, 3, 2, 2}, 2, -1, 1, true);
  Tape<double> tape;
  RecordingScope<double> scope(tape);
  Tensor<double> loss = sum(x);
  CHECK(backward(tape, loss) == 1);
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward of sum(x * x) is 2x") {
  Tensor<double> x = testutil::random_tensor<double>({1, 2, 3, 3}, 3, -2, 2, true);
  Tape<double> tape;
  RecordingScope<double> scope(tape);
  Tensor<double> loss = sum(mul(x, x));
  backward(tape, loss);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == doctest::Approx(2 * x.data()[i]).epsilon(1e-14));
}

TEST_CASE("a tensor used k times accumulates k contributions") {
  // loss = sum(x) + sum(2x) + sum(x * x), with explicit fan-out of x.
  Tensor<double> x = testutil::random_tensor<double>({1, 3, 2, 2}, 4, -1, 1, true);
  Tensor<double> two_w(Shape{1, 3, 1, 1}, 2.0);
  Tensor<double> zero_b(Shape{1, 3, 1, 1}, 0.0);
  Tape<double> tape;
  RecordingScope<double> scope(tape);
  Tensor<double> a = sum(x);
  Tensor<double> b = sum(depthwise_scale(x, two_w, zero_b));
  Tensor<double> c = sum(mul(x, x));
  Tensor<double> loss = add(add(a, b), c);
  const std::size_t visited = backward(tape, loss);
  CHECK(visited == tape.size());
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == doctest::Approx(3 + 2 * x.data()[i]));
}

TEST_CASE("tape entries are in topological order") {
  Tensor<double> x = testutil::random_tensor<double>({1, 2, 4, 4}, 5, -1, 1, true);
  Tape<double> tape;
  RecordingScope<double> scope(tape);
  Tensor<double> y = leaky_relu(upsample2x(downsample2x(x)));
  Tensor<double> loss = sum(add(y, y));
  const auto& e = tape.entries();
  for (std::size_t i = 0; i < e.size(); ++i) {
    for (const auto& in : e[i].inputs) {
      bool earlier = in.same(x);
      for (std::size_t j = 0; j < i; ++j) earlier = earlier || e[j].output.same(in);
      CHECK(earlier);
    }
  }
}

TEST_CASE("backward rejects non-scalar and foreign losses") {
  Tensor<double> x = testutil::random_tensor<double>({1, 1, 2, 2}, 6, -1, 1, true);
  Tape<double> tape;
  RecordingScope<double> scope(tape);
  Tensor<double> y = leaky_relu(x);
  CHECK_THROWS_AS(backward(tape, y), ContractError);
  Tensor<double> foreign(Shape{1, 1, 1, 1}, 1.0);
  CHECK_THROWS_AS(backward(tape, foreign), ContractError);
}

namespace {

Parameter<double> scalar_param(double v) {
  Parameter<double> p{"p", Tensor<double>(Shape{1, 1, 1, 1}, v), 1};
  p.tensor.set_requires_grad(true);
  return p;
}

}  // namespace

TEST_CASE("sgd: momentum 0, lr 1 subtracts the gradient") {
  std::vector<Parameter<double>> ps{scalar_param(5.0)};
  ps[0].tensor.grad_mut()[0] = 1.25;
  Sgd<double> opt(ps);
  opt.step(ps, 1.0, 0.0);
  CHECK(ps[0].tensor.data()[0] == 3.75);
  CHECK_FALSE(ps[0].tensor.has_grad());
}

TEST_CASE("sgd: lr 0 leaves parameters unchanged") {
  std::vector<Parameter<double>> ps{scalar_param(5.0)};
  ps[0].tensor.grad_mut()[0] = 7;
  Sgd<double> opt(ps);
  opt.step(ps, 0.0, 0.9);
  CHECK(ps[0].tensor.data()[0] == 5.0);
}

TEST_CASE("sgd: missing gradient names the parameter") {
  std::vector<Parameter<double>> ps{scalar_param(5.0)};
  Sgd<double> opt(ps);
  try {
    opt.step(ps, 0.1, 0.9);
    FAIL("expected ContractError");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("'p'") != std::string::npos);
  }
}

TEST_CASE("sgd: 200 momentum steps on (p - 3)^2 converge") {
  std::vector<Parameter<double>> ps{scalar_param(0.0)};
  Sgd<double> opt(ps);
  for (int i = 0; i < 200; ++i) {
    Tape<double> tape;
    RecordingScope<double> scope(tape);
    Tensor<double> three(Shape{1, 1, 1, 1}, -3.0);
    Tensor<double> d = add(ps[0].tensor, three);
    backward(tape, mul(d, d));
    opt.step(ps, 0.1, 0.9);
  }
  CHECK(std::abs(ps[0].tensor.data()[0] - 3) < 1e-3);
}

TEST_CASE("duplicate parameter names are rejected") {
  std::vector<Parameter<double>> ps{scalar_param(1), scalar_param(2)};
  CHECK_THROWS_AS(check_unique_names<double>(ps), ContractError);
}

TEST_CASE("filters follow the Glorot bound and are keyed by name") {
  const auto a = make_filter<double>("x.weight", 4, 3, 3, 11);
  const auto b = make_filter<double>("x.weight", 4, 3, 3, 11);
  const auto c = make_filter<double>("y.weight", 4, 3, 3, 11);
  const double bound = std::sqrt(6.0 / (3 * 9 + 4 * 9));
  bool differs = false;
  for (std::size_t i = 0; i < a.tensor.numel(); ++i) {
    CHECK(std::abs(a.tensor.data()[i]) <= bound);
    CHECK(a.tensor.data()[i] == b.tensor.data()[i]);
    differs = differs || a.tensor.data()[i] != c.tensor.data()[i];
  }
  CHECK(differs);
  CHECK(a.dims() == std::vector<std::uint32_t>{4, 3, 3, 3});
  const auto v = make_vector<double>("x.bias", 4, 0.0);
  CHECK(v.dims() == std::vector<std::uint32_t>{4});
}

TEST_CASE("finite_diff_check: linear model has rounding-level error") {
  std::vector<Parameter<double>> ps{make_filter<double>("w", 1, 4, 1, 3)};
  ps[0].tensor.set_requires_grad(true);
  const Tensor<double> x = testutil::random_tensor<double>({1, 4, 3, 3}, 8);
  const Tensor<double> b(Shape{1, 1, 1, 1}, 0.0);
  const auto report =
      finite_diff_check([&] { return sum(pointwise_conv(x, ps[0].tensor, b)); }, ps, 4, 1e-4, 1e-4);
  CHECK(report.passed());
  CHECK(report.max_rel_error() < 1e-9);
}

TEST_CASE("finite_diff_check: pointwise_conv layer passes, corrupted backward fails") {
  std::vector<Parameter<double>> ps{make_filter<double>("w", 3, 4, 1, 3), make_vector<double>("b", 3, 0.1)};
  for (auto& p : ps) p.tensor.set_requires_grad(true);
  const Tensor<double> x = testutil::random_tensor<double>({2, 4, 3, 3}, 9);
  auto loss = [&] {
    const Tensor<double> y = leaky_relu(pointwise_conv(x, ps[0].tensor, ps[1].tensor));
    return sum(mul(y, y));
  };
  CHECK(finite_diff_check(loss, ps, 10, 1e-4, 1e-4).passed());

  std::vector<Parameter<double>> cs{make_filter<double>("w", 3, 4, 3, 3)};
  cs[0].tensor.set_requires_grad(true);
  const Tensor<double> cb(Shape{1, 3, 1, 1}, 0.0);
  auto conv_loss = [&] {
    const Tensor<double> y = conv2d(x, cs[0].tensor, cb, 1, 1);
    return sum(mul(y, y));
  };
  debug::set_backward_fault(true);
  const auto bad = finite_diff_check(conv_loss, cs, 10, 1e-4, 1e-4);
  debug::set_backward_fault(false);
  CHECK_FALSE(bad.passed());
  CHECK(bad.failures() >= 1);
  CHECK(finite_diff_check(conv_loss, cs, 10, 1e-4, 1e-4).passed());
}
