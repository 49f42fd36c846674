// SPDX-License-Identifier: Apache-2.0
#include "umseg/grid.hpp"

#include <algorithm>

namespace umseg {

namespace {

void require_same_dims(const Mask& a, const Mask& b, const char* what) {
  if (a.dims != b.dims)
    throw ValidationError(std::string(what) + ": dims " + to_string(a.dims) + " vs " + to_string(b.dims));
}

}  // namespace

Index count(const Mask& mask) {
  return static_cast<Index>(std::count_if(mask.data.begin(), mask.data.end(), [](auto v) { return v != 0; }));
}

bool is_subset(const Mask& inner, const Mask& outer) {
  require_same_dims(inner, outer, "is_subset");
  for (Index i = 0; i < inner.size(); ++i)
    if (inner[i] && !outer[i]) return false;
  return true;
}

Mask mask_union(const Mask& a, const Mask& b) {
  require_same_dims(a, b, "mask_union");
  Mask out(a.dims);
  for (Index i = 0; i < a.size(); ++i) out[i] = (a[i] || b[i]) ? 1 : 0;
  return out;
}

Index overlap(const Mask& a, const Mask& b) {
  require_same_dims(a, b, "overlap");
  Index n = 0;
  for (Index i = 0; i < a.size(); ++i) n += (a[i] && b[i]) ? 1 : 0;
  return n;
}

std::vector<std::vector<Index>> connected_components(const Mask& mask, Connectivity conn) {
  const Dims3& d = mask.dims;
  std::vector<std::array<Index, 3>> steps;
  for (Index dz = -1; dz <= 1; ++dz)
    for (Index dy = -1; dy <= 1; ++dy)
      for (Index dx = -1; dx <= 1; ++dx) {
        const Index manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (manhattan == 0) continue;
        if (conn == Connectivity::face6 && manhattan != 1) continue;
        steps.push_back({dx, dy, dz});
      }

  std::vector<std::uint8_t> seen(mask.data.size(), 0);
  std::vector<std::vector<Index>> components;
  std::vector<Index> stack;
  for (Index start = 0; start < mask.size(); ++start) {
    if (!mask[start] || seen[static_cast<std::size_t>(start)]) continue;
    std::vector<Index> component;
    seen[static_cast<std::size_t>(start)] = 1;
    stack.push_back(start);
    while (!stack.empty()) {
      const Index cur = stack.back();
      stack.pop_back();
      component.push_back(cur);
      const auto c = d.coords(cur);
      for (const auto& s : steps) {
        const Index x = c[0] + s[0], y = c[1] + s[1], z = c[2] + s[2];
        if (!d.contains(x, y, z)) continue;
        const Index o = d.offset(x, y, z);
        if (mask[o] && !seen[static_cast<std::size_t>(o)]) {
          seen[static_cast<std::size_t>(o)] = 1;
          stack.push_back(o);
        }
      }
    }
    std::sort(component.begin(), component.end());
    components.push_back(std::move(component));
  }
  return components;
}

std::array<double, 3> centroid(const Dims3& dims, const std::vector<Index>& offsets) {
  std::array<double, 3> sum{0, 0, 0};
  for (Index o : offsets) {
    const auto c = dims.coords(o);
    for (int a = 0; a < 3; ++a) sum[a] += static_cast<double>(c[a]);
  }
  const double n = offsets.empty() ? 1.0 : static_cast<double>(offsets.size());
  return {sum[0] / n, sum[1] / n, sum[2] / n};
}

}  // namespace umseg
