// SPDX-License-Identifier: Apache-2.0
//
// Preprocessing (reorientation, isotropic resampling, HU clip/normalize,
// foreground crop), patch sampling and augmentation.
#pragma once

#include <array>
#include <string>

#include "umseg/taxonomy.hpp"
#include "umseg/volume.hpp"

namespace umseg {

/// Normalized image with its universal masks and availability.
struct CaseSample {
  Grid<float> image;
  BinaryMaskSet masks;
  AvailabilityMask availability;
  std::string dataset_id;
  std::string case_id;

  /// Image and mask dims agree and availability matches the mask set.
  void check_consistent() const;
  /// Union of every available mask.
  Mask foreground() const;
};

/// Permutes/flips axes so that `volume.orientation` becomes `target`.
/// Codes are three letters, one from each of {L,R} {A,P} {S,I}, naming the
/// direction each axis increases toward.
Volume reorient(const Volume& volume, const std::string& target);

inline constexpr double kTargetSpacingMm = 1.5;

/// New dims round(n * spacing / target) per axis; trilinear for images,
/// nearest neighbour for label volumes. Already-isotropic input at the
/// target spacing is returned unchanged.
Volume resample_isotropic(const Volume& volume, double target_mm = kTargetSpacingMm);

inline constexpr float kHuMin = -175.0f;
inline constexpr float kHuMax = 250.0f;

/// (clamp(v, -175, 250) + 175) / 425.
float clip_normalize(float hu);
Volume clip_normalize(const Volume& volume);

struct CropRecord {
  std::array<Index, 3> origin{0, 0, 0};
  Dims3 original;
};

struct CroppedCase {
  CaseSample sample;
  CropRecord crop;
};

/// Tight box around voxels strictly above `floor`, applied to the image and
/// every mask. Returns the input unchanged when nothing exceeds `floor`.
CroppedCase crop_foreground(const CaseSample& sample, float floor = 0.0f);

/// Pastes a cropped grid back at its origin, zero elsewhere.
Grid<float> uncrop(const Grid<float>& cropped, const CropRecord& crop);

struct PatchSample {
  CaseSample patch;
  std::array<Index, 3> origin{0, 0, 0};  // in the (padded) case grid
  std::array<Index, 3> pad{0, 0, 0};     // leading zero padding added per axis
  bool foreground_centered = false;
};

/// Symmetric zero padding up to at least `minimum` on every axis.
CaseSample pad_to(const CaseSample& sample, const Dims3& minimum, std::array<Index, 3>* leading = nullptr);

/// Picks a centre voxel from the foreground with probability
/// fg_ratio / (fg_ratio + 1), else from the background, and crops a
/// `patch`-sized box around it (clamped inside the volume).
PatchSample sample_patch(const CaseSample& sample, const Dims3& patch, double fg_ratio, Rng& rng);

struct AugmentConfig {
  double rotate_probability = 0.1;
  double shift_probability = 0.2;
  double shift_offset = 0.1;
};

struct AugmentRecord {
  int rotation_axis = -1;  // -1: none
  double shift = 0.0;      // 0: none
};

/// Rotates `sample` by 90 degrees about `axis` (image and masks). Requires
/// equal extents on the two in-plane axes.
CaseSample rotate90(const CaseSample& sample, int axis);

/// Random 90-degree rotation and intensity shift; never mirrors.
CaseSample augment(const CaseSample& patch, Rng& rng, const AugmentConfig& config = {},
                   AugmentRecord* record = nullptr);

}  // namespace umseg
