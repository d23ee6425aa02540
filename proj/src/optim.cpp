// SPDX-License-Identifier: Apache-2.0
#include "prbfpn/optim.hpp"

#include <cmath>
#include <set>

#include "prbfpn/rng.hpp"

namespace prbfpn {

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

template <typename T>
std::vector<std::uint32_t> Parameter<T>::dims() const {
  const Shape& s = tensor.shape();
  if (rank == 1) return {static_cast<std::uint32_t>(s.c)};
  return {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c),
          static_cast<std::uint32_t>(s.h), static_cast<std::uint32_t>(s.w)};
}

template <typename T>
Parameter<T> make_filter(const std::string& name, int c_out, int c_in, int k, std::uint64_t seed) {
  Tensor<T> t(Shape{c_out, c_in, k, k});
  const double fan_in = static_cast<double>(c_in) * k * k;
  const double fan_out = static_cast<double>(c_out) * k * k;
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  CounterRng rng(seed, fnv1a(name));
  // Draw in double and round once so float and double twins agree to float precision.
  for (T& v : t.mutable_data()) v = static_cast<T>(static_cast<float>(rng.uniform(-bound, bound)));
  t.set_requires_grad(true);
  return Parameter<T>{name, std::move(t), 4};
}

template <typename T>
Parameter<T> make_vector(const std::string& name, int c, T value) {
  Tensor<T> t(Shape{1, c, 1, 1}, value);
  t.set_requires_grad(true);
  return Parameter<T>{name, std::move(t), 1};
}

template <typename T>
void check_unique_names(std::span<const Parameter<T>> params) {
  std::set<std::string> seen;
  for (const auto& p : params) {
    if (!seen.insert(p.name).second) throw ContractError("duplicate parameter name: " + p.name);
  }
}

template <typename T>
std::size_t count_scalars(std::span<const Parameter<T>> params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

template <typename T>
Sgd<T>::Sgd(std::span<const Parameter<T>> params) {
  velocity_.reserve(params.size());
  for (const auto& p : params) velocity_.emplace_back(p.tensor.numel(), T(0));
}

template <typename T>
void Sgd<T>::step(std::span<Parameter<T>> params, T lr, T momentum) {
  if (params.size() != velocity_.size()) {
    throw ContractError("sgd: parameter list does not match optimizer state");
  }
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) throw ContractError("sgd: parameter '" + p.name + "' has no gradient");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& t = params[i].tensor;
    auto v = std::span<T>(velocity_[i]);
    auto w = t.mutable_data();
    const auto g = t.grad();
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = momentum * v[j] + g[j];
      w[j] -= lr * v[j];
    }
    t.clear_grad();
  }
}

template <typename From, typename To>
void copy_parameter_values(std::span<const Parameter<From>> from, std::span<Parameter<To>> to) {
  if (from.size() != to.size()) throw ContractError("copy_parameter_values: parameter count differs");
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i].name != to[i].name || !(from[i].tensor.shape() == to[i].tensor.shape())) {
      throw ContractError("copy_parameter_values: layout differs at '" + from[i].name + "'");
    }
    const auto src = from[i].tensor.data();
    auto dst = to[i].tensor.mutable_data();
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] = static_cast<To>(src[j]);
  }
}

#define PRBFPN_INSTANTIATE_OPTIM(T)                                                             \
  template struct Parameter<T>;                                                                \
  template Parameter<T> make_filter<T>(const std::string&, int, int, int, std::uint64_t);      \
  template Parameter<T> make_vector<T>(const std::string&, int, T);                            \
  template void check_unique_names<T>(std::span<const Parameter<T>>);                          \
  template std::size_t count_scalars<T>(std::span<const Parameter<T>>);                        \
  template class Sgd<T>;

PRBFPN_INSTANTIATE_OPTIM(float)
PRBFPN_INSTANTIATE_OPTIM(double)
template void copy_parameter_values<float, double>(std::span<const Parameter<float>>,
                                                   std::span<Parameter<double>>);
template void copy_parameter_values<double, float>(std::span<const Parameter<double>>,
                                                   std::span<Parameter<float>>);
template void copy_parameter_values<float, float>(std::span<const Parameter<float>>,
                                                  std::span<Parameter<float>>);

}  // namespace prbfpn
