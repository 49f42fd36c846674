// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "umseg/common.hpp"

namespace umseg {

/// Dense voxel grid, x fastest.
template <typename T>
struct Grid {
  Dims3 dims;
  std::vector<T> data;

  Grid() = default;
  explicit Grid(Dims3 d, T fill = T{}) : dims(d), data(static_cast<std::size_t>(d.voxels()), fill) {}

  T& operator()(Index x, Index y, Index z) { return data[static_cast<std::size_t>(dims.offset(x, y, z))]; }
  const T& operator()(Index x, Index y, Index z) const {
    return data[static_cast<std::size_t>(dims.offset(x, y, z))];
  }
  T& operator[](Index i) { return data[static_cast<std::size_t>(i)]; }
  const T& operator[](Index i) const { return data[static_cast<std::size_t>(i)]; }
  Index size() const { return static_cast<Index>(data.size()); }
  bool consistent() const { return size() == dims.voxels(); }

  friend bool operator==(const Grid& a, const Grid& b) { return a.dims == b.dims && a.data == b.data; }
};

/// Binary voxel mask; values are 0 or 1.
using Mask = Grid<std::uint8_t>;
using LabelGrid = Grid<std::int32_t>;

Index count(const Mask& mask);
bool is_subset(const Mask& inner, const Mask& outer);
Mask mask_union(const Mask& a, const Mask& b);
Index overlap(const Mask& a, const Mask& b);

enum class Connectivity { face6 = 6, full26 = 26 };

/// Connected components of a mask as lists of voxel offsets, ordered by
/// their lowest offset.
std::vector<std::vector<Index>> connected_components(const Mask& mask, Connectivity conn);

/// Mean voxel coordinate of a set of offsets.
std::array<double, 3> centroid(const Dims3& dims, const std::vector<Index>& offsets);

/// Copies the box [origin, origin + extent) out of `src`; voxels outside
/// the source read as `fill`.
template <typename T>
Grid<T> crop_box(const Grid<T>& src, const std::array<Index, 3>& origin, const Dims3& extent, T fill = T{}) {
  Grid<T> out(extent, fill);
  for (Index z = 0; z < extent[2]; ++z)
    for (Index y = 0; y < extent[1]; ++y)
      for (Index x = 0; x < extent[0]; ++x) {
        const Index sx = origin[0] + x, sy = origin[1] + y, sz = origin[2] + z;
        if (src.dims.contains(sx, sy, sz)) out(x, y, z) = src(sx, sy, sz);
      }
  return out;
}

}  // namespace umseg
