#pragma once

#include <cstdint>
#include <vector>

#include "prbfpn/rng.hpp"
#include "prbfpn/tensor.hpp"

namespace testutil {

template <typename T = double>
prbfpn::Tensor<T> random_tensor(prbfpn::Shape s, std::uint64_t seed, double lo = -1, double hi = 1,
                                bool grad = false) {
  prbfpn::CounterRng rng(seed, 0x7465737455ULL);
  std::vector<T> v(s.numel());
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  prbfpn::Tensor<T> t(s, std::move(v));
  t.set_requires_grad(grad);
  return t;
}

template <typename T>
std::vector<double> as_double(const prbfpn::Tensor<T>& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

template <typename T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace testutil
