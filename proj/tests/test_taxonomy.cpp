// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <map>

#include "umseg/taxonomy.hpp"

using namespace umseg;

namespace {

LabelGrid labels_of(Dims3 d, std::initializer_list<std::pair<std::array<Index, 3>, int>> voxels) {
  LabelGrid g(d);
  for (const auto& [p, v] : voxels) g(p[0], p[1], p[2]) = v;
  return g;
}

DatasetLabelMap lits_map() {
  DatasetLabelMap m;
  m.dataset_id = "lits";
  m.entries = {{1, 6}, {2, 27}};
  m.annotated = {6, 27};
  return m;
}

}  // namespace

TEST_CASE("registry holds the 32 universal classes in index order") {
  const ClassRegistry r = build_registry();
  CHECK(r.size() == 32);
  CHECK(r.entry(1).name == "Spleen");
  CHECK(r.entry(1).kind == ClassKind::organ);
  CHECK(r.entry(1).parents.empty());
  CHECK(r.entry(2).name == "Right Kidney");
  CHECK(r.entry(32).name == "Kidney Cyst");
  CHECK(r.entry(32).kind == ClassKind::cyst);
  CHECK(r.entry(32).parents == std::vector<int>{2, 3});

  const std::map<int, std::vector<int>> parents{{26, {2, 3}}, {27, {6}},      {28, {11}}, {29, {15}},
                                                {30, {16, 17}}, {31, {18}}, {32, {2, 3}}};
  for (const auto& e : r.entries()) {
    auto it = parents.find(e.index);
    if (it == parents.end()) {
      CHECK(e.kind == ClassKind::organ);
      CHECK(e.parents.empty());
    } else {
      CHECK(e.kind != ClassKind::organ);
      CHECK(e.parents == it->second);
    }
  }
  CHECK(r.resolve("Liver") == 6);
  CHECK(r.resolve("6") == 6);
  CHECK_THROWS_AS(r.resolve("Brain"), ValidationError);
}

TEST_CASE("registry construction rejects broken class lists") {
  using K = ClassKind;
  CHECK_THROWS_AS(ClassRegistry({{"a", 1, K::organ, {}}, {"a", 2, K::organ, {}}}), ValidationError);
  CHECK_THROWS_AS(ClassRegistry({{"a", 1, K::organ, {}}, {"b", 3, K::organ, {}}}), ValidationError);
  CHECK_THROWS_AS(ClassRegistry({{"t", 1, K::tumor, {}}}), ValidationError);
  CHECK_THROWS_AS(ClassRegistry({{"a", 1, K::organ, {}}, {"t", 2, K::tumor, {2}}}), ValidationError);
}

TEST_CASE("registry subset reindexes and drops parents outside the subset") {
  const ClassRegistry s = build_registry().subset({"Liver", "Liver Tumor", "Kidney Tumor"});
  CHECK(s.size() == 3);
  CHECK(s.entry(2).parents == std::vector<int>{1});
  CHECK(s.entry(3).kind == ClassKind::organ);
  CHECK(s.entry(3).parents.empty());
}

TEST_CASE("harmonize unions liver tumor voxels into the liver") {
  const ClassRegistry r = build_registry();
  const Dims3 d(4, 4, 4);
  const LabelGrid labels = labels_of(d, {{{0, 0, 0}, 1}, {{1, 0, 0}, 1}, {{2, 0, 0}, 2}, {{3, 3, 3}, 2}});
  const auto h = harmonize(labels, lits_map(), r);
  for (Index i = 0; i < d.voxels(); ++i) {
    CHECK(h.masks.at(6)[i] == ((labels[i] == 1 || labels[i] == 2) ? 1 : 0));
    CHECK(h.masks.at(27)[i] == (labels[i] == 2 ? 1 : 0));
  }
  CHECK(h.availability.count() == 2);
  CHECK(h.availability.available(6));
  CHECK(h.availability.available(27));
  CHECK(validate_case(h.masks, h.availability, r).empty());
}

TEST_CASE("harmonize without parent inclusion keeps labels exclusive") {
  auto m = lits_map();
  m.parent_inclusion = false;
  const auto h = harmonize(labels_of(Dims3(3, 1, 1), {{{0, 0, 0}, 1}, {{1, 0, 0}, 2}}), m, build_registry());
  CHECK(count(h.masks.at(6)) == 1);
  CHECK(count(h.masks.at(27)) == 1);
}

TEST_CASE("harmonize of an all-zero volume gives empty masks with availability per map") {
  auto m = lits_map();
  m.annotated.insert(1);
  const auto h = harmonize(LabelGrid(Dims3(5, 4, 3)), m, build_registry());
  CHECK(h.masks.masks.size() == 3);
  for (const auto& [k, mask] : h.masks.masks) CHECK(count(mask) == 0);
  CHECK(h.availability.count() == 3);
  CHECK(h.availability.available(1));
  CHECK_FALSE(h.availability.available(2));
}

TEST_CASE("harmonize maps a single voxel to one liver voxel") {
  DatasetLabelMap m;
  m.dataset_id = "one";
  m.entries = {{1, 6}};
  m.annotated = {6};
  const auto h = harmonize(labels_of(Dims3(4, 4, 4), {{{1, 2, 3}, 1}}), m, build_registry());
  CHECK(count(h.masks.at(6)) == 1);
  CHECK(h.masks.at(6)(1, 2, 3) == 1);
}

TEST_CASE("harmonize rejects unknown local labels and inconsistent grids") {
  const ClassRegistry r = build_registry();
  try {
    harmonize(labels_of(Dims3(2, 2, 2), {{{0, 0, 0}, 7}}), lits_map(), r);
    FAIL("expected rejection");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("7") != std::string::npos);
  }
  LabelGrid bad(Dims3(2, 2, 2));
  bad.data.pop_back();
  CHECK_THROWS_AS(harmonize(bad, lits_map(), r), ValidationError);
}

TEST_CASE("label map validation") {
  const ClassRegistry r = build_registry();
  DatasetLabelMap m = lits_map();
  m.entries.push_back({1, 1});
  CHECK_THROWS_AS(m.validate(r), ValidationError);  // duplicate local value

  m = lits_map();
  m.annotated = {6};
  CHECK_THROWS_AS(m.validate(r), ValidationError);  // mapped target not annotated

  m = lits_map();
  m.splits = {{3, 2, 2, 0}};
  m.annotated.insert(2);
  CHECK_THROWS_AS(m.validate(r), ValidationError);  // split onto one class twice
}

TEST_CASE("component-centroid split sends each component to its side") {
  Mask m(Dims3(10, 3, 3));
  m(1, 1, 1) = 1;
  m(9, 1, 1) = 1;
  const auto [left, right] = split_left_right(m, 0, SplitMethod::component_centroid);
  CHECK(count(left) == 1);
  CHECK(count(right) == 1);
  CHECK(left(1, 1, 1) == 1);
  CHECK(right(9, 1, 1) == 1);
}

TEST_CASE("one-sided mask goes wholly to that side") {
  Mask m(Dims3(10, 4, 4));
  for (Index x = 0; x < 4; ++x) m(x, 1, 2) = 1;
  for (auto method : {SplitMethod::component_centroid, SplitMethod::midplane}) {
    const auto [left, right] = split_left_right(m, 0, method);
    CHECK(left == m);
    CHECK(count(right) == 0);
  }
}

TEST_CASE("splitting an empty mask or along a bad axis is rejected") {
  CHECK_THROWS_AS(split_left_right(Mask(Dims3(4, 4, 4)), 0, SplitMethod::midplane), ValidationError);
  Mask m(Dims3(4, 4, 4));
  m[0] = 1;
  CHECK_THROWS_AS(split_left_right(m, 3, SplitMethod::midplane), ValidationError);
}

TEST_CASE("split is a partition on random masks") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Dims3 d(3 + rng.below(9), 3 + rng.below(6), 3 + rng.below(6));
    Mask m(d);
    for (auto& v : m.data) v = rng.bernoulli(0.3) ? 1 : 0;
    m[0] = 1;
    const int axis = static_cast<int>(rng.below(3));
    for (auto method : {SplitMethod::component_centroid, SplitMethod::midplane}) {
      const auto [left, right] = split_left_right(m, axis, method);
      CHECK(overlap(left, right) == 0);
      CHECK(mask_union(left, right) == m);
      CHECK(count(left) + count(right) == count(m));
    }
  }
}

TEST_CASE("component-centroid keeps each 26-component on one side") {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    Mask m(Dims3(12, 6, 6));
    for (auto& v : m.data) v = rng.bernoulli(0.15) ? 1 : 0;
    m(0, 0, 0) = 1;
    m(11, 5, 5) = 1;
    const auto comps = connected_components(m, Connectivity::full26);
    if (comps.size() < 2) continue;
    const auto [left, right] = split_left_right(m, 0, SplitMethod::component_centroid);
    for (const auto& c : comps) {
      // Exact midplane ties fall back to a voxelwise split.
      if (centroid(m.dims, c)[0] == 5.5) continue;
      Index in_left = 0;
      for (Index i : c) in_left += left[i];
      CHECK((in_left == 0 || in_left == static_cast<Index>(c.size())));
    }
  }
}

TEST_CASE("kidney split directive produces disjoint left and right kidneys") {
  const ClassRegistry r = build_registry();
  DatasetLabelMap m;
  m.dataset_id = "kits";
  m.splits = {{1, 3, 2, 0}};
  m.entries = {{2, 26}};
  m.annotated = {2, 3, 26};
  LabelGrid g(Dims3(12, 4, 4));
  for (Index z = 1; z < 3; ++z)
    for (Index y = 1; y < 3; ++y) {
      g(1, y, z) = g(2, y, z) = 1;
      g(9, y, z) = g(10, y, z) = 1;
    }
  g(2, 1, 1) = 2;   // tumor in the left (low-x) kidney
  g(10, 2, 2) = 2;  // tumor in the right kidney
  const auto h = harmonize(g, m, r);
  CHECK(count(h.masks.at(3)) == 8);
  CHECK(count(h.masks.at(2)) == 8);
  CHECK(h.masks.at(3)(2, 1, 1) == 1);
  CHECK(h.masks.at(2)(10, 2, 2) == 1);
  CHECK(overlap(h.masks.at(2), h.masks.at(3)) == 0);
  CHECK(validate_case(h.masks, h.availability, r).empty());
}

TEST_CASE("validator reports a tumor voxel outside its parent") {
  const ClassRegistry r = build_registry();
  auto h = harmonize(labels_of(Dims3(4, 4, 4), {{{0, 0, 0}, 1}, {{1, 0, 0}, 2}}), lits_map(), r);
  h.masks.masks.at(6)(1, 0, 0) = 0;
  const auto v = validate_case(h.masks, h.availability, r);
  REQUIRE(v.size() == 1);
  CHECK(v[0].kind == Violation::Kind::tumor_outside_parent);
  CHECK(v[0].classes == std::vector<int>{27, 6});
  CHECK(v[0].message.find("Liver Tumor") != std::string::npos);
  CHECK(v[0].message.find("'Liver'") != std::string::npos);
}

TEST_CASE("validator reports an available class without a mask") {
  const ClassRegistry r = build_registry();
  auto h = harmonize(LabelGrid(Dims3(2, 2, 2)), lits_map(), r);
  h.availability.set(11);
  const auto v = validate_case(h.masks, h.availability, r);
  REQUIRE(v.size() == 1);
  CHECK(v[0].kind == Violation::Kind::availability_mismatch);
  CHECK(v[0].classes == std::vector<int>{11});
}

TEST_CASE("validator reports overlapping bilateral organs") {
  const ClassRegistry r = build_registry();
  BinaryMaskSet s;
  s.dims = Dims3(2, 2, 2);
  s.masks.emplace(2, Mask(s.dims, 1));
  s.masks.emplace(3, Mask(s.dims, 0));
  s.masks.at(3)[0] = 1;
  AvailabilityMask a(32);
  a.set(2);
  a.set(3);
  const auto v = validate_case(s, a, r);
  REQUIRE(v.size() == 1);
  CHECK(v[0].kind == Violation::Kind::bilateral_overlap);
}

TEST_CASE("harmonize then validate is clean on random label volumes") {
  const ClassRegistry r = build_registry();
  DatasetLabelMap m;
  m.dataset_id = "rand";
  m.entries = {{1, 6}, {2, 27}, {3, 11}, {4, 28}, {6, 26}, {7, 32}};
  m.splits = {{5, 3, 2, 0}};
  m.annotated = {2, 3, 6, 11, 26, 27, 28, 32};
  Rng rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    LabelGrid g(Dims3(4 + rng.below(8), 3 + rng.below(5), 3 + rng.below(5)));
    for (auto& v : g.data) v = rng.bernoulli(0.5) ? 0 : static_cast<int>(1 + rng.below(7));
    const auto h = harmonize(g, m, r);
    const auto v = validate_case(h.masks, h.availability, r);
    CHECK(v.empty());
    for (int k = 1; k <= 32; ++k) CHECK(h.availability.available(k) == h.masks.has(k));
    CHECK(is_subset(h.masks.at(27), h.masks.at(6)));
    CHECK(is_subset(h.masks.at(28), h.masks.at(11)));
    CHECK(is_subset(h.masks.at(26), mask_union(h.masks.at(2), h.masks.at(3))));
  }
}

TEST_CASE("re-encoding harmonized masks as labels reproduces them") {
  const ClassRegistry r = build_registry();
  DatasetLabelMap m = lits_map();
  m.entries.push_back({3, 11});
  m.annotated.insert(11);
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    LabelGrid g(Dims3(6, 5, 4));
    for (auto& v : g.data) v = static_cast<int>(rng.below(4));
    const auto h = harmonize(g, m, r);
    // Tumor wins over liver, so the decoded labeling is consistent.
    LabelGrid decoded(g.dims);
    for (Index i = 0; i < g.size(); ++i)
      decoded[i] = h.masks.at(27)[i] ? 2 : h.masks.at(6)[i] ? 1 : h.masks.at(11)[i] ? 3 : 0;
    const auto again = harmonize(decoded, m, r);
    CHECK(again.masks.masks == h.masks.masks);
    CHECK(again.availability == h.availability);
  }
}
