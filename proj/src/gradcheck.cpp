// SPDX-License-Identifier: Apache-2.0
#include "prbfpn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "prbfpn/rng.hpp"

namespace prbfpn {

bool GradcheckReport::passed() const { return failures() == 0; }

double GradcheckReport::max_rel_error() const {
  double m = 0;
  for (const auto& p : probes) m = std::max(m, p.rel_error);
  return m;
}

std::size_t GradcheckReport::failures() const {
  return static_cast<std::size_t>(std::count_if(probes.begin(), probes.end(), [&](const ProbeResult& p) {
    return !(p.rel_error < tol);
  }));
}

GradcheckReport finite_diff_check(const std::function<Tensor<double>()>& loss_fn,
                                  std::span<Parameter<double>> params, int n_probes, double step,
                                  double tol, std::uint64_t seed) {
  for (auto& p : params) p.tensor.clear_grad();
  {
    Tape<double> tape;
    Tensor<double> loss;
    {
      RecordingScope<double> scope(tape);
      loss = loss_fn();
    }
    backward(tape, loss);
  }

  std::size_t total = 0;
  for (const auto& p : params) total += p.tensor.numel();

  GradcheckReport report;
  report.tol = tol;
  if (total == 0) return report;
  CounterRng rng(seed, 0x67726164ULL);
  for (int probe = 0; probe < n_probes; ++probe) {
    std::size_t flat = rng.next() % total;
    std::size_t which = 0;
    while (flat >= params[which].tensor.numel()) {
      flat -= params[which].tensor.numel();
      ++which;
    }
    Tensor<double>& t = params[which].tensor;
    const double analytic = t.has_grad() ? t.grad()[flat] : 0.0;
    auto values = t.mutable_data();
    const double original = values[flat];
    values[flat] = original + step;
    const double plus = loss_fn().item();
    values[flat] = original - step;
    const double minus = loss_fn().item();
    values[flat] = original;
    const double numeric = (plus - minus) / (2.0 * step);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradcheckFloor});
    report.probes.push_back(
        ProbeResult{params[which].name, flat, analytic, numeric, std::abs(analytic - numeric) / denom});
  }
  for (auto& p : params) p.tensor.clear_grad();
  return report;
}

}  // namespace prbfpn
