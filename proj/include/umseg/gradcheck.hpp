// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace umseg {

/// Compares the analytic gradient reported by `f` against central
/// differences on the listed coordinates (all when `coordinates` is empty).
/// `f(x, grad)` returns f(x) and, when `grad` is non-null, writes the
/// analytic gradient there. Returns
/// max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
template <typename Function>
double finite_diff_check(Function&& f, const Eigen::VectorXd& point, double eps = 1e-5,
                         const std::vector<Eigen::Index>& coordinates = {}) {
  Eigen::VectorXd analytic(point.size());
  f(point, &analytic);
  double worst = 0.0;
  Eigen::VectorXd probe = point;
  auto visit = [&](Eigen::Index i) {
    probe[i] = point[i] + eps;
    const double up = f(probe, nullptr);
    probe[i] = point[i] - eps;
    const double down = f(probe, nullptr);
    probe[i] = point[i];
    const double numeric = (up - down) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  };
  if (coordinates.empty())
    for (Eigen::Index i = 0; i < point.size(); ++i) visit(i);
  else
    for (Eigen::Index i : coordinates) visit(i);
  return worst;
}

struct GradcheckResult {
  std::string name;
  double max_error = 0.0;
  Eigen::Index coordinates = 0;  // coordinates probed
};

inline constexpr double kGradcheckTolerance = 1e-4;

/// f64 finite-difference checks of every differentiable primitive and of
/// the full masked model loss on an 8^3 patch (C = 8, K = 4) under both
/// reference backbones.
std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed = 0);

}  // namespace umseg
