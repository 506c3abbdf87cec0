#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "omae/core/tensor.hpp"

namespace omae {

inline constexpr double kGradCheckEps = 1e-5;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  // Location of the worst coordinate.
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares backward() against central differences for a scalar function
/// of x. Returns max |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                  const Tensor<double>& x, double eps = kGradCheckEps);

/// Same comparison for a closure that reads the given parameter tensors.
/// With max_coords > 0, at most that many coordinates per tensor are
/// sampled (deterministically from seed).
GradCheckReport grad_check_params(const std::function<Tensor<double>()>& loss_fn,
                                  std::vector<Tensor<double>> params,
                                  double eps = kGradCheckEps, std::size_t max_coords = 0,
                                  std::uint64_t seed = 0);

}  // namespace omae
