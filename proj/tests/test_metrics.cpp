// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <cmath>

#include "json.hpp"
#include "oracles.hpp"
#include "umseg/metrics.hpp"

using namespace umseg;

namespace {

Mask box(const Dims3& d, std::array<Index, 3> lo, std::array<Index, 3> hi) {
  Mask m(d);
  for (Index z = lo[2]; z < hi[2]; ++z)
    for (Index y = lo[1]; y < hi[1]; ++y)
      for (Index x = lo[0]; x < hi[0]; ++x) m(x, y, z) = 1;
  return m;
}

Mask random_mask(const Dims3& d, Rng& rng, double p) {
  Mask m(d);
  for (auto& v : m.data) v = rng.bernoulli(p) ? 1 : 0;
  return m;
}

Grid<float> as_probability(const Mask& m, float on = 0.9f) {
  Grid<float> g(m.dims);
  for (Index i = 0; i < m.size(); ++i) g[i] = m[i] ? on : 0.1f;
  return g;
}

}  // namespace

TEST_CASE("dsc examples") {
  const Dims3 d(6, 6, 6);
  const Mask a = box(d, {1, 1, 1}, {3, 3, 3});
  CHECK(dsc(a, a) == 1.0);
  CHECK(dsc(a, box(d, {4, 4, 4}, {6, 6, 6})) == 0.0);
  Mask p(d), t(d);
  for (Index i : {0, 1, 2, 3}) t[i] = 1;
  for (Index i : {2, 3, 4, 5}) p[i] = 1;
  CHECK(dsc(p, t) == 0.5);
  CHECK(dsc(Mask(d), Mask(d)) == 1.0);
  CHECK(dsc(Mask(d), a) == 0.0);
}

TEST_CASE("dsc properties on random masks") {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const Dims3 d(1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(8));
    const Mask a = random_mask(d, rng, rng.uniform()), b = random_mask(d, rng, rng.uniform());
    const double v = dsc(a, b);
    CHECK(v == dsc(b, a));
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(v == oracle::dsc(a, b));
    if (count(a) > 0) CHECK(dsc(a, a) == 1.0);
  }
}

TEST_CASE("surface uses 6-connectivity") {
  const Dims3 d(5, 5, 5);
  const Mask cube = box(d, {1, 1, 1}, {4, 4, 4});
  const Mask s = surface(cube);
  CHECK(count(s) == 26);
  CHECK(s(2, 2, 2) == 0);
  CHECK(count(surface(Mask(d, 1))) == 125 - 27);
}

TEST_CASE("nsd on one-voxel shifted cubes") {
  const Dims3 d(7, 7, 7);
  const Mask a = box(d, {2, 2, 2}, {5, 5, 5});
  const Mask b = box(d, {3, 2, 2}, {6, 5, 5});
  const Spacing sp{1.5, 1.5, 1.5};
  CHECK(nsd(a, b, 1.5, sp) == 1.0);
  CHECK(nsd(a, b, 1.0, sp) < 1.0);
  // Each surface has 26 voxels. Missed on each side: the 9 voxels of the
  // outer face plus the voxel sitting on the other cube's centre.
  CHECK(nsd(a, b, 1.0, sp) == doctest::Approx((16.0 + 16.0) / 52.0));
  CHECK(nsd(a, b, 1.0, sp) == doctest::Approx(oracle::nsd(a, b, 1.0, sp)).epsilon(1e-12));
}

TEST_CASE("nsd conventions and properties") {
  const Dims3 d(6, 6, 6);
  const Spacing sp{1.0, 2.0, 0.5};
  CHECK(nsd(Mask(d), Mask(d), 1.0, sp) == 1.0);
  CHECK(nsd(box(d, {0, 0, 0}, {2, 2, 2}), Mask(d), 1.0, sp) == 0.0);
  CHECK(nsd(Mask(d), box(d, {0, 0, 0}, {2, 2, 2}), 1.0, sp) == 0.0);
  Rng rng(2);
  for (int i = 0; i < 30; ++i) {
    const Mask a = random_mask(d, rng, 0.2), b = random_mask(d, rng, 0.2);
    CHECK(nsd(a, a, 0.0, sp) == 1.0);
    CHECK(nsd(a, b, 1.3, sp) == nsd(b, a, 1.3, sp));
    double prev = -1.0;
    for (double tau : {0.0, 0.5, 1.0, 2.0, 3.0, 10.0}) {
      const double v = nsd(a, b, tau, sp);
      CHECK(v >= prev);
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      prev = v;
    }
  }
}

TEST_CASE("distance transform matches brute force") {
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    const Dims3 d(1 + rng.below(9), 1 + rng.below(9), 1 + rng.below(9));
    const Spacing sp{rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0)};
    const Mask sites = random_mask(d, rng, 0.08);
    const auto dt = squared_distance_transform(sites, sp);
    for (Index v = 0; v < d.voxels(); ++v) {
      const auto p = d.coords(v);
      double best = std::numeric_limits<double>::infinity();
      for (Index s = 0; s < d.voxels(); ++s) {
        if (!sites[s]) continue;
        const auto q = d.coords(s);
        double acc = 0;
        for (int a = 0; a < 3; ++a) {
          const double dd = static_cast<double>(p[a] - q[a]) * sp[a];
          acc += dd * dd;
        }
        best = std::min(best, acc);
      }
      if (std::isinf(best))
        CHECK(std::isinf(dt[static_cast<std::size_t>(v)]));
      else
        CHECK(dt[static_cast<std::size_t>(v)] == doctest::Approx(best).epsilon(1e-12));
    }
  }
}

TEST_CASE("nsd matches the all-pairs oracle on random 12^3 masks") {
  Rng rng(4);
  for (int i = 0; i < 25; ++i) {
    const Dims3 d(12, 12, 12);
    const Spacing sp{rng.uniform(0.5, 2.5), rng.uniform(0.5, 2.5), rng.uniform(0.5, 2.5)};
    const Mask a = random_mask(d, rng, 0.1 + 0.3 * rng.uniform()), b = random_mask(d, rng, 0.1 + 0.3 * rng.uniform());
    const double tau = rng.uniform(0.0, 4.0);
    CHECK(std::abs(nsd(a, b, tau, sp) - oracle::nsd(a, b, tau, sp)) <= 1e-9);
  }
}

TEST_CASE("detection rule") {
  const Dims3 d(12, 12, 12);
  CHECK_FALSE(detect(Grid<float>(d)));
  CHECK(detect(as_probability(box(d, {1, 1, 1}, {6, 6, 5}))));
  Mask scattered(d);
  for (Index i = 0; i < 7; ++i) scattered(i * 2 % 12, (i * 4) % 12, i) = 1;
  REQUIRE(count(scattered) == 7);
  for (const auto& c : connected_components(scattered, Connectivity::full26)) CHECK(c.size() == 1);
  CHECK_FALSE(detect(as_probability(scattered)));

  // Diagonal chain: one 26-component of 8 voxels, eight 6-components.
  Mask chain(d);
  for (Index i = 0; i < 8; ++i) chain(i, i, i) = 1;
  CHECK(detect(as_probability(chain)));
  CHECK_FALSE(detect(as_probability(chain), {0.95, 8}));
  CHECK(detect(as_probability(chain, 0.5f), {0.5, 8}));
  CHECK_FALSE(detect(as_probability(chain), {0.5, 9}));
}

TEST_CASE("detection statistics reproduce the reference harmonic means") {
  auto run = [](int tp, int pos, int tn, int neg) {
    std::vector<bool> decisions, truth;
    for (int i = 0; i < pos; ++i) {
      truth.push_back(true);
      decisions.push_back(i < tp);
    }
    for (int i = 0; i < neg; ++i) {
      truth.push_back(false);
      decisions.push_back(i >= tn);
    }
    return detection_stats(decisions, truth);
  };
  const auto liver = run(8, 9, 19, 20);
  CHECK(liver.sensitivity == doctest::Approx(88.89).epsilon(1e-4));
  CHECK(liver.specificity == doctest::Approx(95.0));
  CHECK(std::abs(liver.harmonic - 91.84) <= 0.01);
  const auto kidney = run(11, 12, 19, 20);
  CHECK(std::abs(kidney.harmonic - 93.31) <= 0.01);
  const auto pancreas = run(78, 83, 73, 80);
  CHECK(std::abs(pancreas.sensitivity - 93.98) <= 0.005);
  CHECK(std::abs(pancreas.specificity - 91.25) <= 0.005);
  CHECK(std::abs(pancreas.harmonic - 92.59) <= 0.01);
  CHECK(pancreas.true_positive == 78);
  CHECK(pancreas.false_negative == 5);
  CHECK(pancreas.true_negative == 73);
  CHECK(pancreas.false_positive == 7);

  CHECK(std::abs(harmonic_mean(88.89, 95.00) - 91.84) <= 0.01);
  CHECK(std::abs(harmonic_mean(91.67, 95.00) - 93.31) <= 0.01);
  CHECK(std::abs(harmonic_mean(93.98, 91.25) - 92.59) <= 0.01);
  CHECK(harmonic_mean(0.0, 0.0) == 0.0);

  CHECK_THROWS_AS(detection_stats({true, false}, {true, true}), ValidationError);
  CHECK_THROWS_AS(detection_stats({true}, {true, false}), ValidationError);
}

TEST_CASE("harmonic mean bounds") {
  Rng rng(5);
  for (int i = 0; i < 500; ++i) {
    const double s = rng.uniform(0.0, 100.0), p = rng.uniform(0.0, 100.0);
    const double h = harmonic_mean(s, p);
    CHECK(h <= (s + p) / 2 + 1e-12);
    CHECK(h <= std::max(s, p) + 1e-12);
    CHECK(h >= std::min(s, p) - 1e-12);
    CHECK(h < 100.0);
  }
  CHECK(harmonic_mean(100.0, 100.0) == 100.0);
}

TEST_CASE("report scores only available classes") {
  const ClassRegistry reg = build_registry().subset({"Liver", "Liver Tumor", "Pancreas"});
  const Dims3 d(8, 8, 8);
  auto make_case = [&](std::string id, bool tumor) {
    EvalCase c;
    c.case_id = std::move(id);
    c.truth.dims = d;
    c.availability = AvailabilityMask(3);
    c.truth.masks.emplace(1, box(d, {1, 1, 1}, {6, 6, 6}));
    c.availability.set(1);
    c.truth.masks.emplace(2, tumor ? box(d, {2, 2, 2}, {4, 4, 4}) : Mask(d));
    c.availability.set(2);
    return c;
  };
  const std::vector<EvalCase> cases{make_case("a", true), make_case("b", false)};
  const Mask pred_liver_b = box(d, {2, 1, 1}, {6, 6, 6});
  std::vector<std::vector<Grid<float>>> preds{
      {as_probability(cases[0].truth.at(1)), as_probability(cases[0].truth.at(2)), Grid<float>(d, 0.99f)},
      {as_probability(pred_liver_b), Grid<float>(d, 0.0f), Grid<float>(d, 0.99f)}};
  ReportOptions opt;
  opt.tolerance_overrides = {{2, 3.0}};
  opt.threads = 2;
  const MetricReport r = report(cases, preds, reg, opt);
  CHECK(r.case_count == 2);
  REQUIRE(r.classes.size() == 3);
  CHECK(r.classes[0].cases.size() == 2);
  CHECK(r.classes[0].cases[0].dsc == 1.0);
  const double dsc_b = oracle::dsc(pred_liver_b, cases[1].truth.at(1));
  CHECK(r.classes[0].cases[1].dsc == dsc_b);
  CHECK(r.classes[0].mean_dsc() == doctest::Approx((1.0 + dsc_b) / 2));
  const double nsd_b = oracle::nsd(pred_liver_b, cases[1].truth.at(1), 1.5, {1.5, 1.5, 1.5});
  CHECK(r.classes[0].mean_nsd() == doctest::Approx((1.0 + nsd_b) / 2).epsilon(1e-12));
  CHECK(r.classes[1].tolerance_mm == 3.0);
  CHECK(r.classes[1].mean_dsc() == 1.0);
  CHECK(r.classes[2].absent());

  REQUIRE(r.detection.size() == 1);
  CHECK(r.detection[0].name == "Liver Tumor");
  CHECK(r.detection[0].positives == 1);
  CHECK(r.detection[0].negatives == 1);
  REQUIRE(r.detection[0].stats);
  CHECK(r.detection[0].stats->harmonic == 100.0);

  const auto j = nlohmann::json::parse(report_json(r));
  CHECK(j.dump().find("absent") != std::string::npos);
  const std::string csv = report_csv(r);
  CHECK(csv.rfind("case,class_index,class_name,dsc,nsd\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 4);

  preds.pop_back();
  CHECK_THROWS_AS(report(cases, preds, reg, opt), ValidationError);
}

TEST_CASE("perfect single-case prediction scores one") {
  const ClassRegistry reg = build_registry().subset({"Spleen"});
  const Dims3 d(5, 5, 5);
  EvalCase c;
  c.case_id = "x";
  c.truth.dims = d;
  c.truth.masks.emplace(1, box(d, {1, 1, 1}, {3, 4, 4}));
  c.availability = AvailabilityMask(1);
  c.availability.set(1);
  const auto r = report({c}, {{as_probability(c.truth.at(1))}}, reg);
  CHECK(r.classes[0].mean_dsc() == 1.0);
  CHECK(r.classes[0].mean_nsd() == 1.0);
}

TEST_CASE("similarity csv layout") {
  Eigen::MatrixXd s(2, 2);
  s << 1, 0, 0, 1;
  const std::string csv = similarity_csv({"a", "b"}, s);
  CHECK(csv.rfind("class,a,b\n", 0) == 0);
  CHECK(csv.find("a,1,0\n") != std::string::npos);
}
