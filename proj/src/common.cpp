// SPDX-License-Identifier: Apache-2.0
#include "umseg/common.hpp"

#include <cmath>
#include <numbers>

namespace umseg {

std::string to_string(const Dims3& d) {
  return std::to_string(d[0]) + "x" + std::to_string(d[1]) + "x" + std::to_string(d[2]);
}

double Rng::normal() {
  // Box-Muller; u1 kept away from zero.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace umseg
