#pragma once

#include <span>

#include "gradgpt/gradcheck.hpp"

namespace gradgpt::testing {

/// Worst relative error of analytic against central differences of loss
/// over every element of values.
template <typename F>
double max_fd_error(std::span<double> values, std::span<const double> analytic, F&& loss, double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double numeric = finite_diff(loss, values[i]);
    worst = std::max(worst, relative_error(analytic[i], numeric, floor));
  }
  return worst;
}

}  // namespace gradgpt::testing
