// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "prbfpn/tensor.hpp"

namespace prbfpn {

/// A named trainable tensor. Filters have rank 4 (c_out, c_in, k, k);
/// per-channel vectors have rank 1 and live in a (1, c, 1, 1) tensor.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  int rank = 4;

  std::vector<std::uint32_t> dims() const;
};

/// Filter of shape (c_out, c_in, k, k), Glorot-uniform with fan_in = c_in*k*k
/// and fan_out = c_out*k*k, drawn from the counter stream keyed by `name`.
template <typename T>
Parameter<T> make_filter(const std::string& name, int c_out, int c_in, int k, std::uint64_t seed);

/// Per-channel vector filled with `value`.
template <typename T>
Parameter<T> make_vector(const std::string& name, int c, T value);

/// Throws ContractError on duplicate names.
template <typename T>
void check_unique_names(std::span<const Parameter<T>> params);

template <typename T>
std::size_t count_scalars(std::span<const Parameter<T>> params);

/// Classical momentum SGD: v <- momentum*v + grad; p <- p - lr*v.
/// Gradients are released after each step.
template <typename T>
class Sgd {
 public:
  explicit Sgd(std::span<const Parameter<T>> params);

  void step(std::span<Parameter<T>> params, T lr, T momentum);

  std::vector<std::vector<T>>& velocities() { return velocity_; }
  const std::vector<std::vector<T>>& velocities() const { return velocity_; }

 private:
  std::vector<std::vector<T>> velocity_;
};

/// Copies values between two models with identical parameter layouts
/// (e.g. a float model and its double twin).
template <typename From, typename To>
void copy_parameter_values(std::span<const Parameter<From>> from, std::span<Parameter<To>> to);

}  // namespace prbfpn
