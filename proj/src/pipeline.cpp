// SPDX-License-Identifier: Apache-2.0
#include "umseg/pipeline.hpp"

#include <algorithm>
#include <cmath>

namespace umseg {

void CaseSample::check_consistent() const {
  if (!image.consistent()) throw ValidationError("case image holds the wrong number of voxels");
  if (masks.dims != image.dims)
    throw ValidationError("case '" + case_id + "': image dims " + to_string(image.dims) + " vs mask dims " +
                          to_string(masks.dims));
  for (const auto& [cls, m] : masks.masks) {
    if (m.dims != image.dims) throw ValidationError("case '" + case_id + "': mask " + std::to_string(cls) + " has wrong dims");
    if (cls < 1 || cls > availability.size() || !availability.available(cls))
      throw ValidationError("case '" + case_id + "': mask " + std::to_string(cls) + " is not flagged available");
  }
  if (static_cast<std::size_t>(availability.count()) != masks.masks.size())
    throw ValidationError("case '" + case_id + "': availability flags do not match the mask set");
}

Mask CaseSample::foreground() const {
  Mask fg(image.dims);
  for (const auto& [cls, m] : masks.masks)
    for (Index i = 0; i < m.size(); ++i)
      if (m[i]) fg[i] = 1;
  return fg;
}

// -------------------------------------------------------------- orientation

namespace {

int axis_pair(char c) {
  switch (c) {
    case 'L': case 'R': return 0;
    case 'A': case 'P': return 1;
    case 'S': case 'I': return 2;
    default: return -1;
  }
}

void check_code(const std::string& code) {
  if (code.size() != 3) throw ValidationError("orientation code '" + code + "' must have three letters");
  std::array<bool, 3> seen{false, false, false};
  for (char c : code) {
    const int p = axis_pair(c);
    if (p < 0 || seen[static_cast<std::size_t>(p)])
      throw ValidationError("invalid orientation code '" + code + "'");
    seen[static_cast<std::size_t>(p)] = true;
  }
}

}  // namespace

Volume reorient(const Volume& volume, const std::string& target) {
  check_code(volume.orientation);
  check_code(target);
  if (volume.orientation == target) return volume;
  std::array<int, 3> source_axis{};
  std::array<bool, 3> flip{};
  for (int t = 0; t < 3; ++t)
    for (int s = 0; s < 3; ++s)
      if (axis_pair(volume.orientation[static_cast<std::size_t>(s)]) == axis_pair(target[static_cast<std::size_t>(t)])) {
        source_axis[static_cast<std::size_t>(t)] = s;
        flip[static_cast<std::size_t>(t)] = volume.orientation[static_cast<std::size_t>(s)] != target[static_cast<std::size_t>(t)];
      }
  Volume out = volume;
  out.orientation = target;
  for (int t = 0; t < 3; ++t) {
    out.dims[t] = volume.dims[source_axis[static_cast<std::size_t>(t)]];
    out.spacing[static_cast<std::size_t>(t)] = volume.spacing[static_cast<std::size_t>(source_axis[static_cast<std::size_t>(t)])];
  }
  for (Index z = 0; z < out.dims[2]; ++z)
    for (Index y = 0; y < out.dims[1]; ++y)
      for (Index x = 0; x < out.dims[0]; ++x) {
        const std::array<Index, 3> t{x, y, z};
        std::array<Index, 3> s{};
        for (int a = 0; a < 3; ++a) {
          const auto ua = static_cast<std::size_t>(a);
          const int sa = source_axis[ua];
          s[static_cast<std::size_t>(sa)] = flip[ua] ? volume.dims[sa] - 1 - t[ua] : t[ua];
        }
        out.values[static_cast<std::size_t>(out.dims.offset(x, y, z))] =
            volume.values[static_cast<std::size_t>(volume.dims.offset(s[0], s[1], s[2]))];
      }
  return out;
}

// --------------------------------------------------------------- resampling

Volume resample_isotropic(const Volume& volume, double target_mm) {
  volume.validate();
  if (!(target_mm > 0.0)) throw ValidationError("target spacing must be positive");
  const bool already = std::all_of(volume.spacing.begin(), volume.spacing.end(),
                                   [&](double s) { return std::abs(s - target_mm) < 1e-9; });
  if (already) return volume;

  Volume out = volume;
  std::array<double, 3> scale{};
  for (int a = 0; a < 3; ++a) {
    const auto ua = static_cast<std::size_t>(a);
    out.dims[a] = std::max<Index>(1, std::llround(static_cast<double>(volume.dims[a]) * volume.spacing[ua] / target_mm));
    out.spacing[ua] = target_mm;
    scale[ua] = target_mm / volume.spacing[ua];
  }
  out.values.assign(static_cast<std::size_t>(out.dims.voxels()), 0.0f);

  // Source coordinate of output voxel i: voxel centres aligned, clamped.
  auto source = [&](int a, Index i) {
    const double s = (static_cast<double>(i) + 0.5) * scale[static_cast<std::size_t>(a)] - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(volume.dims[a] - 1));
  };
  const bool labels = volume.kind == VolumeKind::labels;
  for (Index z = 0; z < out.dims[2]; ++z)
    for (Index y = 0; y < out.dims[1]; ++y)
      for (Index x = 0; x < out.dims[0]; ++x) {
        const std::array<double, 3> s{source(0, x), source(1, y), source(2, z)};
        float value;
        if (labels) {
          value = volume.values[static_cast<std::size_t>(
              volume.dims.offset(std::llround(s[0]), std::llround(s[1]), std::llround(s[2])))];
        } else {
          std::array<Index, 3> lo{}, hi{};
          std::array<double, 3> w{};
          for (int a = 0; a < 3; ++a) {
            const auto ua = static_cast<std::size_t>(a);
            lo[ua] = static_cast<Index>(std::floor(s[ua]));
            hi[ua] = std::min(lo[ua] + 1, volume.dims[a] - 1);
            w[ua] = s[ua] - static_cast<double>(lo[ua]);
          }
          double acc = 0.0;
          for (int corner = 0; corner < 8; ++corner) {
            double weight = 1.0;
            std::array<Index, 3> c{};
            for (int a = 0; a < 3; ++a) {
              const auto ua = static_cast<std::size_t>(a);
              const bool upper = (corner >> a) & 1;
              c[ua] = upper ? hi[ua] : lo[ua];
              weight *= upper ? w[ua] : 1.0 - w[ua];
            }
            if (weight == 0.0) continue;
            acc += weight * volume.values[static_cast<std::size_t>(volume.dims.offset(c[0], c[1], c[2]))];
          }
          value = static_cast<float>(acc);
        }
        out.values[static_cast<std::size_t>(out.dims.offset(x, y, z))] = value;
      }
  return out;
}

// --------------------------------------------------------------- intensity

float clip_normalize(float hu) { return (std::clamp(hu, kHuMin, kHuMax) - kHuMin) / (kHuMax - kHuMin); }

Volume clip_normalize(const Volume& volume) {
  if (volume.kind != VolumeKind::image) throw ValidationError("clip_normalize applies to image volumes only");
  Volume out = volume;
  out.dtype = VoxelType::f32;
  for (float& v : out.values) v = clip_normalize(v);
  return out;
}

// -------------------------------------------------------------------- crop

namespace {

CaseSample crop_sample(const CaseSample& s, const std::array<Index, 3>& origin, const Dims3& extent) {
  CaseSample out;
  out.dataset_id = s.dataset_id;
  out.case_id = s.case_id;
  out.availability = s.availability;
  out.image = crop_box(s.image, origin, extent, 0.0f);
  out.masks.dims = extent;
  for (const auto& [cls, m] : s.masks.masks) out.masks.masks.emplace(cls, crop_box(m, origin, extent, std::uint8_t{0}));
  return out;
}

}  // namespace

CroppedCase crop_foreground(const CaseSample& sample, float floor) {
  sample.check_consistent();
  const Dims3& d = sample.image.dims;
  std::array<Index, 3> lo{d[0], d[1], d[2]}, hi{-1, -1, -1};
  for (Index z = 0; z < d[2]; ++z)
    for (Index y = 0; y < d[1]; ++y)
      for (Index x = 0; x < d[0]; ++x)
        if (sample.image(x, y, z) > floor) {
          const std::array<Index, 3> c{x, y, z};
          for (std::size_t a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], c[a]);
            hi[a] = std::max(hi[a], c[a]);
          }
        }
  CroppedCase out;
  out.crop.original = d;
  if (hi[0] < 0) {
    out.sample = sample;
    return out;
  }
  const Dims3 extent(hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1);
  out.crop.origin = lo;
  out.sample = crop_sample(sample, lo, extent);
  return out;
}

Grid<float> uncrop(const Grid<float>& cropped, const CropRecord& crop) {
  Grid<float> out(crop.original, 0.0f);
  for (Index z = 0; z < cropped.dims[2]; ++z)
    for (Index y = 0; y < cropped.dims[1]; ++y)
      for (Index x = 0; x < cropped.dims[0]; ++x) {
        const Index ox = x + crop.origin[0], oy = y + crop.origin[1], oz = z + crop.origin[2];
        if (out.dims.contains(ox, oy, oz)) out(ox, oy, oz) = cropped(x, y, z);
      }
  return out;
}

// ------------------------------------------------------------------ patches

CaseSample pad_to(const CaseSample& sample, const Dims3& minimum, std::array<Index, 3>* leading) {
  const Dims3& d = sample.image.dims;
  std::array<Index, 3> before{0, 0, 0};
  Dims3 padded = d;
  for (int a = 0; a < 3; ++a)
    if (d[a] < minimum[a]) {
      const Index total = minimum[a] - d[a];
      before[static_cast<std::size_t>(a)] = total / 2;
      padded[a] = minimum[a];
    }
  if (leading) *leading = before;
  if (padded == d) return sample;
  return crop_sample(sample, {-before[0], -before[1], -before[2]}, padded);
}

PatchSample sample_patch(const CaseSample& sample, const Dims3& patch, double fg_ratio, Rng& rng) {
  sample.check_consistent();
  if (!(fg_ratio >= 0.0)) throw ValidationError("foreground ratio must be non-negative");
  PatchSample out;
  const CaseSample padded = pad_to(sample, patch, &out.pad);
  const Dims3& d = padded.image.dims;

  const Mask fg = padded.foreground();
  const Index n_fg = count(fg), n_bg = d.voxels() - n_fg;
  bool want_fg = rng.bernoulli(fg_ratio / (fg_ratio + 1.0));
  if (n_fg == 0) want_fg = false;
  if (n_bg == 0) want_fg = true;
  // The pick-th voxel of the chosen class, scanning in memory order.
  Index pick = rng.below(want_fg ? n_fg : n_bg);
  Index centre = 0;
  for (Index i = 0; i < fg.size(); ++i) {
    if ((fg[i] != 0) != want_fg) continue;
    if (pick-- == 0) {
      centre = i;
      break;
    }
  }
  out.foreground_centered = want_fg;
  const auto c = d.coords(centre);
  for (int a = 0; a < 3; ++a) {
    const auto ua = static_cast<std::size_t>(a);
    out.origin[ua] = std::clamp(c[ua] - patch[a] / 2, Index{0}, d[a] - patch[a]);
  }
  out.patch = crop_sample(padded, out.origin, patch);
  return out;
}

// ------------------------------------------------------------- augmentation

namespace {

template <typename T>
Grid<T> rotate_grid(const Grid<T>& g, int axis) {
  const int a = (axis + 1) % 3, b = (axis + 2) % 3;
  if (g.dims[a] != g.dims[b]) throw ValidationError("90-degree rotation needs equal in-plane extents");
  Grid<T> out(g.dims);
  const Index n = g.dims[a];
  for (Index z = 0; z < g.dims[2]; ++z)
    for (Index y = 0; y < g.dims[1]; ++y)
      for (Index x = 0; x < g.dims[0]; ++x) {
        std::array<Index, 3> src{x, y, z};
        std::array<Index, 3> dst = src;
        dst[static_cast<std::size_t>(a)] = src[static_cast<std::size_t>(b)];
        dst[static_cast<std::size_t>(b)] = n - 1 - src[static_cast<std::size_t>(a)];
        out(dst[0], dst[1], dst[2]) = g(x, y, z);
      }
  return out;
}

}  // namespace

CaseSample rotate90(const CaseSample& sample, int axis) {
  if (axis < 0 || axis > 2) throw ValidationError("rotation axis must be 0, 1 or 2");
  CaseSample out = sample;
  out.image = rotate_grid(sample.image, axis);
  out.masks.dims = out.image.dims;
  for (auto& [cls, m] : out.masks.masks) m = rotate_grid(sample.masks.masks.at(cls), axis);
  return out;
}

CaseSample augment(const CaseSample& patch, Rng& rng, const AugmentConfig& config, AugmentRecord* record) {
  AugmentRecord rec;
  CaseSample out = patch;
  // Draws happen unconditionally so the stream position is independent of
  // which branches fire.
  const bool rotate = rng.bernoulli(config.rotate_probability);
  const int axis = static_cast<int>(rng.below(3));
  const bool shift = rng.bernoulli(config.shift_probability);
  const double offset = rng.uniform(-config.shift_offset, config.shift_offset);
  if (rotate) {
    out = rotate90(out, axis);
    rec.rotation_axis = axis;
  }
  if (shift) {
    for (float& v : out.image.data) v = std::clamp(v + static_cast<float>(offset), 0.0f, 1.0f);
    rec.shift = offset;
  }
  if (record) *record = rec;
  return out;
}

}  // namespace umseg
