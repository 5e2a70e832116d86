#pragma once

#include "crackgen/params.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace crackgen::testing {

/// Compares the analytic gradient of `loss(params, grads)` against central
/// differences. `loss` must fill `grads` (when non-null) and return the loss.
/// Checks up to `per_array` evenly spaced entries of each array (0 = all).
/// Returns max over arrays of |fd - analytic|_inf / max(|analytic|_inf, 1e-8).
inline double max_relative_gradient_error(
    ParameterSet<double>& params,
    const std::function<double(ParameterSet<double>&, ParameterSet<double>*)>& loss, Index per_array = 0,
    double h = 1e-6) {
  ParameterSet<double> grads = params.zeros_like();
  loss(params, &grads);
  double worst = 0;
  for (auto& [name, m] : params) {
    const Index n = m.size();
    const Index count = per_array == 0 ? n : std::min(per_array, n);
    double diff = 0, scale = 0;
    for (Index k = 0; k < count; ++k) {
      const Index i = count == n ? k : (k * n) / count;
      const double orig = m.data()[i];
      m.data()[i] = orig + h;
      const double up = loss(params, nullptr);
      m.data()[i] = orig - h;
      const double down = loss(params, nullptr);
      m.data()[i] = orig;
      const double fd = (up - down) / (2 * h);
      const double an = grads[name].data()[i];
      diff = std::max(diff, std::abs(fd - an));
      scale = std::max(scale, std::abs(an));
    }
    worst = std::max(worst, diff / std::max(scale, 1e-8));
  }
  return worst;
}

}  // namespace crackgen::testing
