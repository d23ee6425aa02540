// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "prbfpn/optim.hpp"

namespace prbfpn {

struct ProbeResult {
  std::string param;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradcheckReport {
  double tol = 0;
  std::vector<ProbeResult> probes;

  bool passed() const;
  double max_rel_error() const;
  std::size_t failures() const;
};

/// Denominator floor of the relative error. Gradients smaller than this are
/// compared on an absolute scale of kGradcheckFloor * tol. A central
/// difference at step 1e-6 on an O(1) loss resolves about 1e-9 in absolute
/// terms (rounding), so the absolute scale is kept above that.
inline constexpr double kGradcheckFloor = 1e-5;

/// Compares analytic gradients of a scalar loss against central differences.
/// `loss_fn` must be deterministic and build its graph from `params`; it is
/// called once under a tape and twice per probe without one. Probes pick
/// coordinates uniformly over all scalars in `params`.
GradcheckReport finite_diff_check(const std::function<Tensor<double>()>& loss_fn,
                                  std::span<Parameter<double>> params, int n_probes, double step,
                                  double tol, std::uint64_t seed = 1);

}  // namespace prbfpn
