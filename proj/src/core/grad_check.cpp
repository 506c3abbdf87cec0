#include "omae/core/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "omae/core/rng.hpp"

namespace omae {

namespace {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-12});
  return std::abs(analytic - numeric) / denom;
}

Tensor<double> checked_scalar(const Tensor<double>& t) {
  if (t.numel() != 1)
    throw ShapeError("grad_check needs a scalar-valued function, got " + shape_str(t.shape()));
  return t;
}

}  // namespace

GradCheckReport grad_check_params(const std::function<Tensor<double>()>& loss_fn,
                                  std::vector<Tensor<double>> params, double eps,
                                  std::size_t max_coords, std::uint64_t seed) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  auto loss = checked_scalar(loss_fn());
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  GradCheckReport report;
  Rng rng(seed);
  NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& values = params[pi].values();
    std::vector<std::size_t> coords(values.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (max_coords > 0 && coords.size() > max_coords) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(max_coords);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = checked_scalar(loss_fn()).item();
      values[i] = saved - eps;
      const double down = checked_scalar(loss_fn()).item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = relative_error(analytic[pi][i], numeric);
      if (report.coords_checked++ == 0 || err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_param = pi;
        report.worst_index = i;
        report.worst_analytic = analytic[pi][i];
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                  const Tensor<double>& x, double eps) {
  Tensor<double> input = x.clone();
  return grad_check_params([&] { return f(input); }, {input}, eps).max_rel_error;
}

}  // namespace omae
