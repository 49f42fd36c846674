// SPDX-License-Identifier: Apache-2.0
//
// UMV1 volume files: "UMV1", u32 header length, JSON header
// {dims, spacing_mm, dtype, kind, orientation}, raw voxels x fastest.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "umseg/grid.hpp"

namespace umseg {

enum class VoxelType { f32, u8 };
enum class VolumeKind { image, labels };

struct Volume {
  Dims3 dims;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm
  std::string orientation = "RAS";
  VolumeKind kind = VolumeKind::image;
  VoxelType dtype = VoxelType::f32;
  std::vector<float> values;

  /// Checks dims, spacing and value count; throws ValidationError.
  void validate() const;

  Grid<float> grid() const;
  /// Integer labels; throws on non-integral or negative values.
  LabelGrid labels() const;

  static Volume from_grid(const Grid<float>& g, std::array<double, 3> spacing, std::string orientation = "RAS");
  static Volume from_labels(const LabelGrid& g, std::array<double, 3> spacing, std::string orientation = "RAS");
  static Volume from_mask(const Mask& m, std::array<double, 3> spacing, std::string orientation = "RAS");
};

std::vector<std::uint8_t> encode_umv1(const Volume& volume);
Volume decode_umv1(const std::vector<std::uint8_t>& bytes);

Volume read_volume(const std::filesystem::path& path);
void write_volume(const Volume& volume, const std::filesystem::path& path);

}  // namespace umseg
