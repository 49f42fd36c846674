// SPDX-License-Identifier: Apache-2.0
#include "umseg/volume.hpp"

#include <cmath>
#include <set>

#include "json.hpp"

#include "umseg/binary_io.hpp"

namespace umseg {

using nlohmann::json;

void Volume::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < 1) throw ValidationError("volume dims must be >= 1, got " + to_string(dims));
    if (!(spacing[static_cast<std::size_t>(a)] > 0.0) || !std::isfinite(spacing[static_cast<std::size_t>(a)]))
      throw ValidationError("volume spacing must be positive and finite");
  }
  if (static_cast<Index>(values.size()) != dims.voxels())
    throw ValidationError("volume holds " + std::to_string(values.size()) + " values for dims " + to_string(dims));
  if (dtype == VoxelType::u8)
    for (float v : values)
      if (v < 0.0f || v > 255.0f || v != std::floor(v))
        throw ValidationError("u8 volume holds non-byte value " + std::to_string(v));
}

Grid<float> Volume::grid() const {
  Grid<float> g(dims);
  g.data = values;
  return g;
}

LabelGrid Volume::labels() const {
  LabelGrid g(dims);
  for (Index i = 0; i < g.size(); ++i) {
    const float v = values[static_cast<std::size_t>(i)];
    if (v < 0.0f || v != std::floor(v)) throw ValidationError("label volume holds non-integer value " + std::to_string(v));
    g[i] = static_cast<std::int32_t>(v);
  }
  return g;
}

Volume Volume::from_grid(const Grid<float>& g, std::array<double, 3> spacing, std::string orientation) {
  Volume v;
  v.dims = g.dims;
  v.spacing = spacing;
  v.orientation = std::move(orientation);
  v.values = g.data;
  return v;
}

Volume Volume::from_labels(const LabelGrid& g, std::array<double, 3> spacing, std::string orientation) {
  Volume v;
  v.dims = g.dims;
  v.spacing = spacing;
  v.orientation = std::move(orientation);
  v.kind = VolumeKind::labels;
  v.dtype = VoxelType::u8;
  for (auto x : g.data) {
    if (x < 0 || x > 255) v.dtype = VoxelType::f32;
    v.values.push_back(static_cast<float>(x));
  }
  return v;
}

Volume Volume::from_mask(const Mask& m, std::array<double, 3> spacing, std::string orientation) {
  Volume v;
  v.dims = m.dims;
  v.spacing = spacing;
  v.orientation = std::move(orientation);
  v.kind = VolumeKind::labels;
  v.dtype = VoxelType::u8;
  v.values.assign(m.data.begin(), m.data.end());
  return v;
}

std::vector<std::uint8_t> encode_umv1(const Volume& volume) {
  volume.validate();
  json header = {
      {"dims", {volume.dims[0], volume.dims[1], volume.dims[2]}},
      {"spacing_mm", volume.spacing},
      {"dtype", volume.dtype == VoxelType::f32 ? "f32" : "u8"},
      {"kind", volume.kind == VolumeKind::image ? "image" : "labels"},
      {"orientation", volume.orientation},
  };
  const std::string text = header.dump();
  ByteWriter w;
  w.text("UMV1");
  w.uint(static_cast<std::uint32_t>(text.size()));
  w.text(text);
  for (float v : volume.values) {
    if (volume.dtype == VoxelType::f32)
      w.f32(v);
    else
      w.uint(static_cast<std::uint8_t>(v));
  }
  return w.take();
}

Volume decode_umv1(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "UMV1 volume");
  if (bytes.size() < 4 || r.text(4) != "UMV1") throw ValidationError("bad magic in UMV1 volume (expected UMV1)");
  const auto header_len = r.uint<std::uint32_t>();
  json header;
  try {
    header = json::parse(r.text(header_len));
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("UMV1 header is not valid JSON: ") + e.what());
  }
  static const std::set<std::string> known = {"dims", "spacing_mm", "dtype", "kind", "orientation"};
  for (const auto& [key, _] : header.items())
    if (!known.count(key)) throw ValidationError("UMV1 header has unknown key '" + key + "'");
  for (const auto& key : known)
    if (!header.contains(key)) throw ValidationError("UMV1 header is missing '" + key + "'");

  Volume v;
  try {
    const auto dims = header.at("dims").get<std::vector<Index>>();
    const auto spacing = header.at("spacing_mm").get<std::vector<double>>();
    if (dims.size() != 3 || spacing.size() != 3) throw ValidationError("UMV1 dims and spacing_mm need 3 entries");
    v.dims = Dims3(dims[0], dims[1], dims[2]);
    v.spacing = {spacing[0], spacing[1], spacing[2]};
    const auto dtype = header.at("dtype").get<std::string>();
    const auto kind = header.at("kind").get<std::string>();
    if (dtype != "f32" && dtype != "u8") throw ValidationError("UMV1 dtype must be f32 or u8, got " + dtype);
    if (kind != "image" && kind != "labels") throw ValidationError("UMV1 kind must be image or labels, got " + kind);
    v.dtype = dtype == "f32" ? VoxelType::f32 : VoxelType::u8;
    v.kind = kind == "image" ? VolumeKind::image : VolumeKind::labels;
    v.orientation = header.at("orientation").get<std::string>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("UMV1 header has a field of the wrong type: ") + e.what());
  }
  for (int a = 0; a < 3; ++a)
    if (v.dims[a] < 1) throw ValidationError("UMV1 dims must be >= 1");
  const std::size_t n = static_cast<std::size_t>(v.dims.voxels());
  const std::size_t width = v.dtype == VoxelType::f32 ? 4 : 1;
  r.need(n * width);
  v.values.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    v.values[i] = v.dtype == VoxelType::f32 ? r.f32() : static_cast<float>(r.uint<std::uint8_t>());
  if (r.remaining() != 0) throw ValidationError("UMV1 volume has " + std::to_string(r.remaining()) + " trailing bytes");
  v.validate();
  return v;
}

Volume read_volume(const std::filesystem::path& path) {
  try {
    return decode_umv1(read_file(path));
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void write_volume(const Volume& volume, const std::filesystem::path& path) { write_file(path, encode_umv1(volume)); }

}  // namespace umseg
