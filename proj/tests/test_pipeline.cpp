// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <cstring>
#include <set>

#include "oracles.hpp"
#include "umseg/binary_io.hpp"
#include "umseg/pipeline.hpp"

using namespace umseg;

namespace {

Volume image_volume(const Dims3& d, std::array<double, 3> spacing, std::uint64_t seed) {
  Rng rng(seed);
  Grid<float> g(d);
  for (auto& v : g.data) v = static_cast<float>(rng.uniform(-300.0, 400.0));
  return Volume::from_grid(g, spacing);
}

CaseSample random_case(const Dims3& d, std::uint64_t seed, double density = 0.2) {
  Rng rng(seed);
  CaseSample s;
  s.case_id = "c" + std::to_string(seed);
  s.image = Grid<float>(d);
  for (auto& v : s.image.data) v = static_cast<float>(rng.uniform());
  s.masks.dims = d;
  s.availability = AvailabilityMask(4);
  for (int k : {1, 3}) {
    Mask m(d);
    for (auto& v : m.data) v = rng.bernoulli(density) ? 1 : 0;
    s.masks.masks.emplace(k, std::move(m));
    s.availability.set(k);
  }
  return s;
}

}  // namespace

TEST_CASE("UMV1 round trip and header layout") {
  const Volume v = image_volume(Dims3(3, 4, 5), {0.8, 0.9, 2.5}, 1);
  const auto bytes = encode_umv1(v);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "UMV1");
  ByteReader r(bytes, "test");
  r.text(4);
  const auto header_len = r.uint<std::uint32_t>();
  CHECK(bytes.size() == 8 + header_len + 60 * 4);
  const Volume back = decode_umv1(bytes);
  CHECK(back.dims == v.dims);
  CHECK(back.spacing == v.spacing);
  CHECK(back.values == v.values);
  CHECK(back.kind == VolumeKind::image);

  LabelGrid labels(Dims3(2, 2, 2));
  labels[3] = 7;
  const Volume lv = Volume::from_labels(labels, {1, 1, 1}, "LPS");
  const auto lb = encode_umv1(lv);
  ByteReader lr(lb, "t");
  lr.text(4);
  CHECK(lb.size() == 8 + lr.uint<std::uint32_t>() + 8);
  const Volume lback = decode_umv1(lb);
  CHECK(lback.dtype == VoxelType::u8);
  CHECK(lback.orientation == "LPS");
  CHECK(lback.labels() == labels);
}

TEST_CASE("UMV1 rejects malformed input") {
  auto bytes = encode_umv1(image_volume(Dims3(2, 2, 2), {1, 1, 1}, 2));
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_umv1(bad), ValidationError);
  bad = bytes;
  bad.pop_back();
  CHECK_THROWS_AS(decode_umv1(bad), ValidationError);
  Volume v = image_volume(Dims3(2, 2, 2), {1, 1, 1}, 2);
  v.spacing[1] = 0.0;
  CHECK_THROWS_AS(v.validate(), ValidationError);
}

TEST_CASE("reorientation permutes and flips axes") {
  Grid<float> g(Dims3(3, 2, 4));
  for (Index i = 0; i < g.size(); ++i) g[i] = static_cast<float>(i);
  Volume v = Volume::from_grid(g, {1.0, 2.0, 3.0}, "LPS");
  const Volume ras = reorient(v, "RAS");
  CHECK(ras.dims == v.dims);
  for (Index z = 0; z < 4; ++z)
    for (Index y = 0; y < 2; ++y)
      for (Index x = 0; x < 3; ++x) CHECK(ras.grid()(x, y, z) == g(2 - x, 1 - y, z));

  const Volume sra = reorient(Volume::from_grid(g, {1.0, 2.0, 3.0}, "RAS"), "SRA");
  CHECK(sra.dims == Dims3(4, 3, 2));
  CHECK(sra.spacing == std::array<double, 3>{3.0, 1.0, 2.0});
  CHECK(sra.grid()(3, 2, 1) == g(2, 1, 3));
  CHECK(reorient(reorient(v, "SPL"), "LPS").values == v.values);
  CHECK_THROWS_AS(reorient(v, "RRS"), ValidationError);
}

TEST_CASE("resampling to 1.5 mm") {
  Grid<float> g(Dims3(4, 4, 12), 7.25f);
  const Volume v = resample_isotropic(Volume::from_grid(g, {1.5, 1.5, 3.0}));
  CHECK(v.dims == Dims3(4, 4, 24));
  for (float x : v.values) CHECK(x == 7.25f);

  const Volume same = image_volume(Dims3(5, 6, 7), {1.5, 1.5, 1.5}, 3);
  const Volume r = resample_isotropic(same);
  CHECK(r.dims == same.dims);
  CHECK(r.values == same.values);

  const Volume mixed = resample_isotropic(image_volume(Dims3(10, 9, 7), {0.7, 2.2, 4.0}, 4));
  CHECK(mixed.dims == Dims3(5, 13, 19));
  CHECK(mixed.spacing == std::array<double, 3>{1.5, 1.5, 1.5});
}

TEST_CASE("label resampling emits only input values") {
  Rng rng(5);
  LabelGrid g(Dims3(7, 5, 6));
  for (auto& v : g.data) v = static_cast<int>(rng.below(3)) * 4;
  const Volume r = resample_isotropic(Volume::from_labels(g, {0.9, 2.0, 3.3}));
  std::set<float> seen(r.values.begin(), r.values.end());
  for (float v : seen) CHECK((v == 0.0f || v == 4.0f || v == 8.0f));
}

TEST_CASE("trilinear interpolation of a linear ramp") {
  Grid<float> g(Dims3(4, 1, 1));
  for (Index x = 0; x < 4; ++x) g(x, 0, 0) = static_cast<float>(10 * x);
  const Volume r = resample_isotropic(Volume::from_grid(g, {3.0, 1.5, 1.5}));
  REQUIRE(r.dims == Dims3(8, 1, 1));
  // Centre-aligned source coordinate (i + 0.5) / 2 - 0.5, clamped to [0, 3].
  for (Index i = 0; i < 8; ++i) {
    const double s = std::clamp((static_cast<double>(i) + 0.5) * 0.5 - 0.5, 0.0, 3.0);
    CHECK(r.values[static_cast<std::size_t>(i)] == doctest::Approx(10.0 * s).epsilon(1e-6));
  }
  CHECK_THROWS_AS(resample_isotropic(Volume::from_grid(g, {0.0, 1.5, 1.5})), ValidationError);
  CHECK_THROWS_AS(resample_isotropic(Volume::from_grid(g, {-1.0, 1.5, 1.5})), ValidationError);
}

TEST_CASE("clip and normalize") {
  CHECK(clip_normalize(-175.0f) == 0.0f);
  CHECK(clip_normalize(250.0f) == 1.0f);
  CHECK(clip_normalize(37.5f) == doctest::Approx(0.5f));
  CHECK(clip_normalize(-1000.0f) == 0.0f);
  CHECK(clip_normalize(3000.0f) == 1.0f);
  float prev = -1.0f;
  for (float hu = -400.0f; hu <= 400.0f; hu += 0.5f) {
    const float v = clip_normalize(hu);
    CHECK(v >= prev);
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
    prev = v;
  }
}

TEST_CASE("foreground crop") {
  CaseSample s = random_case(Dims3(6, 7, 8), 1);
  s.image = Grid<float>(s.image.dims, 0.0f);
  s.image(2, 3, 4) = 0.7f;
  const auto c = crop_foreground(s);
  CHECK(c.sample.image.dims == Dims3(1, 1, 1));
  CHECK(c.crop.origin == std::array<Index, 3>{2, 3, 4});
  CHECK(c.sample.masks.at(1)(0, 0, 0) == s.masks.at(1)(2, 3, 4));

  CaseSample full = random_case(Dims3(4, 5, 3), 2);
  for (auto& v : full.image.data) v = 0.5f;
  const auto id = crop_foreground(full);
  CHECK(id.sample.image == full.image);
  CHECK(id.crop.origin == std::array<Index, 3>{0, 0, 0});

  CaseSample s2 = random_case(Dims3(9, 8, 7), 3);
  for (auto& v : s2.image.data) v = 0.0f;
  for (Index x = 2; x < 5; ++x) s2.image(x, 4, 3) = 0.2f;
  s2.image(3, 6, 5) = 0.3f;
  const auto c2 = crop_foreground(s2);
  CHECK(c2.sample.image.dims == Dims3(3, 3, 3));
  const auto restored = uncrop(c2.sample.image, c2.crop);
  CHECK(restored == s2.image);
}

TEST_CASE("patch sampling is deterministic and congruent") {
  const CaseSample s = random_case(Dims3(20, 18, 16), 4, 0.05);
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng a(seed), b(seed);
    const auto p = sample_patch(s, Dims3(8, 8, 8), 1.0, a);
    const auto q = sample_patch(s, Dims3(8, 8, 8), 1.0, b);
    CHECK(p.origin == q.origin);
    CHECK(p.patch.image == q.patch.image);
    CHECK(p.patch.availability == s.availability);
    for (Index z = 0; z < 8; ++z)
      for (Index y = 0; y < 8; ++y)
        for (Index x = 0; x < 8; ++x) {
          const Index sx = p.origin[0] + x, sy = p.origin[1] + y, sz = p.origin[2] + z;
          CHECK(p.patch.image(x, y, z) == s.image(sx, sy, sz));
          for (int k : {1, 3}) CHECK(p.patch.masks.at(k)(x, y, z) == s.masks.at(k)(sx, sy, sz));
        }
  }
}

TEST_CASE("small cases are zero padded symmetrically") {
  const CaseSample s = random_case(Dims3(4, 9, 6), 5);
  Rng rng(1);
  const auto p = sample_patch(s, Dims3(8, 8, 8), 1.0, rng);
  CHECK(p.pad == std::array<Index, 3>{2, 0, 1});
  CHECK(p.patch.image.dims == Dims3(8, 8, 8));
  for (Index z = 0; z < 8; ++z)
    for (Index y = 0; y < 8; ++y)
      for (Index x = 0; x < 8; ++x) {
        const Index sx = p.origin[0] + x - 2, sy = p.origin[1] + y, sz = p.origin[2] + z - 1;
        const float want = s.image.dims.contains(sx, sy, sz) ? s.image(sx, sy, sz) : 0.0f;
        CHECK(p.patch.image(x, y, z) == want);
      }
}

TEST_CASE("foreground-centred fraction follows the ratio") {
  CaseSample s = random_case(Dims3(12, 12, 12), 6, 0.1);
  int fg = 0;
  Rng rng(2024);
  for (int i = 0; i < 10000; ++i) {
    const auto p = sample_patch(s, Dims3(4, 4, 4), 2.0, rng);
    if (p.foreground_centered) ++fg;
  }
  const double frac = fg / 10000.0;
  CHECK(frac >= 0.64);
  CHECK(frac <= 0.69);
}

TEST_CASE("rotation is a permutation and four turns are the identity") {
  const CaseSample s = random_case(Dims3(6, 6, 6), 7);
  for (int axis = 0; axis < 3; ++axis) {
    const CaseSample r = rotate90(s, axis);
    for (int k : {1, 3}) CHECK(count(r.masks.at(k)) == count(s.masks.at(k)));
    auto sorted = [](std::vector<float> v) {
      std::sort(v.begin(), v.end());
      return v;
    };
    CHECK(sorted(r.image.data) == sorted(s.image.data));
    CHECK_FALSE(r.image == s.image);
    CaseSample back = s;
    for (int i = 0; i < 4; ++i) back = rotate90(back, axis);
    CHECK(back.image == s.image);
    CHECK(back.masks.masks == s.masks.masks);
  }
  CHECK_THROWS_AS(rotate90(random_case(Dims3(6, 5, 6), 1), 0), ValidationError);
}

TEST_CASE("augmentation never mirrors and keeps availability") {
  const CaseSample s = random_case(Dims3(5, 5, 5), 8);
  Rng rng(3);
  int rotations = 0, shifts = 0;
  for (int i = 0; i < 400; ++i) {
    AugmentRecord rec;
    const CaseSample a = augment(s, rng, {}, &rec);
    CHECK(a.availability == s.availability);
    if (rec.rotation_axis >= 0) ++rotations;
    if (rec.shift != 0.0) {
      ++shifts;
      CHECK(std::abs(rec.shift) <= 0.1);
    }
    CaseSample expect = rec.rotation_axis >= 0 ? rotate90(s, rec.rotation_axis) : s;
    CHECK(a.masks.masks == expect.masks.masks);
    for (Index j = 0; j < a.image.size(); ++j)
      CHECK(a.image[j] == std::clamp(expect.image[j] + static_cast<float>(rec.shift), 0.0f, 1.0f));
  }
  CHECK(rotations > 20);
  CHECK(rotations < 70);
  CHECK(shifts > 50);
  CHECK(shifts < 115);
}

TEST_CASE("intensity shift clamps at one") {
  CaseSample s = random_case(Dims3(2, 2, 2), 9);
  for (auto& v : s.image.data) v = 0.95f;
  AugmentConfig cfg;
  cfg.rotate_probability = 0.0;
  cfg.shift_probability = 1.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    AugmentRecord rec;
    const auto a = augment(s, rng, cfg, &rec);
    if (rec.shift < 0.05) continue;
    for (float v : a.image.data) CHECK(v == 1.0f);
  }
}
