// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <cmath>

#include "oracles.hpp"
#include "umseg/autodiff.hpp"
#include "umseg/gradcheck.hpp"

using namespace umseg;
using T = Tensor<double>;

namespace {

T random(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  T t(std::move(s));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

double max_abs_diff(const T& a, const T& b) {
  REQUIRE(a.shape() == b.shape());
  return (a.values() - b.values()).cwiseAbs().maxCoeff();
}

T conv(const T& x, const T& w, const T* b, ConvOptions opt) {
  Tape<double> tape;
  const Var bv = b ? tape.leaf(*b) : Var{};
  return tape.value(conv3d(tape, tape.leaf(x), tape.leaf(w), bv, opt));
}

}  // namespace

TEST_CASE("tensor shape and value count must agree") {
  CHECK_THROWS_AS(T({2, 3}, Eigen::VectorXd::Zero(5)), ValidationError);
  T t({2, 3, 4, 5});
  CHECK(t.size() == 120);
  CHECK(t.voxels() == 60);
  CHECK(t.spatial() == Dims3(3, 4, 5));
}

TEST_CASE("identity 1x1x1 kernel is the identity") {
  const T x = T::constant({1, 3, 3, 3}, 1.0);
  const T out = conv(x, T::constant({1, 1, 1, 1, 1}, 1.0), nullptr, {});
  CHECK(out.shape() == x.shape());
  CHECK(out.values() == x.values());
}

TEST_CASE("stride-2 box kernel over ones gives eight per output") {
  const T out = conv(T::constant({1, 4, 4, 4}, 1.0), T::constant({1, 1, 2, 2, 2}, 1.0), nullptr, {2, 0, 1});
  CHECK(out.shape() == Shape{1, 2, 2, 2});
  for (Index i = 0; i < out.size(); ++i) CHECK(out[i] == 8.0);
}

TEST_CASE("zero kernel gives zero output") {
  Rng rng(1);
  const T out = conv(random({2, 5, 4, 3}, rng), T({3, 2, 3, 3, 3}), nullptr, {1, 1, 1});
  CHECK(out.values().isZero(0.0));
}

TEST_CASE("conv3d matches the direct-loop oracle") {
  Rng rng(2);
  struct Case {
    Index ci, co, k, x, y, z;
    ConvOptions opt;
  };
  for (const Case& c : {Case{1, 1, 3, 5, 5, 5, {1, 1, 1}}, Case{2, 3, 3, 6, 5, 4, {1, 1, 1}},
                        Case{3, 2, 3, 7, 6, 8, {2, 1, 1}}, Case{2, 2, 3, 9, 7, 6, {1, 2, 2}},
                        Case{2, 4, 2, 4, 6, 5, {2, 0, 1}}, Case{1, 2, 1, 3, 4, 2, {1, 0, 1}},
                        Case{2, 1, 3, 5, 5, 5, {1, 0, 2}}}) {
    const T x = random({c.ci, c.x, c.y, c.z}, rng);
    const T w = random({c.co, c.ci, c.k, c.k, c.k}, rng);
    const T b = random({c.co}, rng);
    const T got = conv(x, w, &b, c.opt);
    const T want = oracle::conv3d(x, w, &b, c.opt.stride, c.opt.padding, c.opt.dilation);
    CHECK(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("conv3d output extent law") {
  for (Index n : {4, 5, 9})
    for (Index k : {1, 2, 3})
      for (Index s : {1, 2})
        for (Index p : {0, 1})
          if (n + 2 * p >= k) CHECK(conv_extent(n, k, {s, p, 1}) == (n + 2 * p - k) / s + 1);
}

TEST_CASE("conv3d is linear in its input") {
  Rng rng(3);
  const T x = random({2, 4, 4, 4}, rng), w = random({2, 2, 3, 3, 3}, rng);
  T ax = x;
  ax.values() *= 2.5;
  T scaled = conv(x, w, nullptr, {1, 1, 1});
  scaled.values() *= 2.5;
  CHECK(max_abs_diff(conv(ax, w, nullptr, {1, 1, 1}), scaled) < 1e-12);
}

TEST_CASE("conv3d rejects incompatible shapes naming both") {
  Tape<double> tape;
  const Var x = tape.leaf(T({2, 4, 4, 4}));
  try {
    conv3d(tape, x, tape.leaf(T({1, 3, 3, 3, 3})), Var{});
    FAIL("accepted");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[1,3,3,3,3]") != std::string::npos);
    CHECK(msg.find("[2,4,4,4]") != std::string::npos);
  }
  CHECK_THROWS_AS(conv3d(tape, x, tape.leaf(T({1, 2, 5, 5, 5})), Var{}), ValidationError);
}

TEST_CASE("pointwise conv arithmetic and identity") {
  Tape<double> tape;
  T x({2, 1, 1, 1});
  x[0] = 1;
  x[1] = 2;
  T w({1, 2});
  w[0] = 3;
  w[1] = 4;
  const Var out = pointwise_conv(tape, tape.leaf(x), tape.leaf(w), tape.leaf(T::constant({1}, 5.0)));
  CHECK(tape.value(out)[0] == 16.0);

  Rng rng(4);
  const T v = random({3, 2, 3, 4}, rng);
  T eye({3, 3});
  for (Index i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  CHECK(tape.value(pointwise_conv(tape, tape.leaf(v), tape.leaf(eye), tape.leaf(T({3})))).values() == v.values());
}

TEST_CASE("pointwise conv equals a 1x1x1 conv3d") {
  Rng rng(5);
  const T x = random({4, 3, 5, 2}, rng), w = random({3, 4}, rng), b = random({3}, rng);
  Tape<double> tape;
  const T a = tape.value(pointwise_conv(tape, tape.leaf(x), tape.leaf(w), tape.leaf(b)));
  const T c = conv(x, w.reshaped({3, 4, 1, 1, 1}), &b, {});
  CHECK(max_abs_diff(a, c) <= 1e-12);
}

TEST_CASE("linear, activations and pooling") {
  Tape<double> tape;
  T x({2});
  x[0] = 1;
  x[1] = -2;
  T w({2, 2});
  w[0] = 1, w[1] = 2, w[2] = 3, w[3] = 4;
  T b({2});
  b[0] = 0.5;
  const T y = tape.value(linear(tape, tape.leaf(x), tape.leaf(w), tape.leaf(b)));
  CHECK(y[0] == -2.5);
  CHECK(y[1] == -5.0);

  T r({3});
  r[0] = -3, r[1] = 3, r[2] = 0;
  const T rv = tape.value(relu(tape, tape.leaf(r)));
  CHECK(rv[0] == 0.0);
  CHECK(rv[1] == 3.0);
  CHECK(tape.value(sigmoid(tape, tape.leaf(T({1}))))[0] == 0.5);

  Rng rng(6);
  const T big = random({1, 4, 4, 4}, rng, -800.0, 800.0);
  const T s = tape.value(sigmoid(tape, tape.leaf(big)));
  for (Index i = 0; i < s.size(); ++i) {
    CHECK(s[i] >= 0.0);
    CHECK(s[i] <= 1.0);
    CHECK(std::isfinite(s[i]));
  }

  T c = T::constant({2, 3, 2, 2}, 0.0);
  for (Index i = 0; i < 12; ++i) c[i] = 1.75;
  for (Index i = 12; i < 24; ++i) c[i] = -4.0;
  const T g = tape.value(global_avg_pool(tape, tape.leaf(c)));
  CHECK(g[0] == 1.75);
  CHECK(g[1] == -4.0);
}

TEST_CASE("sigmoid gradient is p(1-p) pointwise") {
  Rng rng(7);
  Tape<double> tape;
  const Var x = tape.leaf(random({1, 3, 3, 3}, rng, -5.0, 5.0));
  const Var p = sigmoid(tape, x);
  const Var s = dot_constant(tape, p, T::constant({1, 3, 3, 3}, 1.0));
  tape.backward(s);
  const T& pv = tape.value(p);
  const T g = tape.grad(x);
  for (Index i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(pv[i] * (1 - pv[i])).epsilon(1e-12));
}

TEST_CASE("bce values") {
  Tape<double> tape;
  const Var half = tape.leaf(T::constant({1, 2, 1, 1}, 0.5));
  CHECK(tape.value(bce(tape, half, T::constant({1, 2, 1, 1}, 1.0)))[0] == doctest::Approx(0.6931).epsilon(1e-4));

  T y({1, 4, 1, 1});
  y[0] = 1, y[2] = 1;
  const double eps = bce_epsilon<double>();
  CHECK(tape.value(bce(tape, tape.leaf(y), y))[0] <= -std::log(1 - eps) + 1e-15);

  Rng rng(8);
  const T p = random({1, 4, 1, 1}, rng, 0.1, 0.9);
  T keep({1, 4, 1, 1});
  keep[1] = keep[3] = 1;
  const double want = -0.5 * ((y[1] * std::log(p[1]) + (1 - y[1]) * std::log(1 - p[1])) +
                              (y[3] * std::log(p[3]) + (1 - y[3]) * std::log(1 - p[3])));
  CHECK(tape.value(bce(tape, tape.leaf(p), y, keep))[0] == doctest::Approx(want).epsilon(1e-12));
  CHECK_THROWS_AS(bce(tape, tape.leaf(p), y, T({1, 4, 1, 1})), ValidationError);
}

TEST_CASE("finite-difference checker on simple functions") {
  auto square = [](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
    if (g) (*g)[0] = 2 * x[0];
    return x[0] * x[0];
  };
  CHECK(finite_diff_check(square, Eigen::VectorXd::Constant(1, 3.0)) < 1e-6);

  Tape<double> tape;
  const Var x = tape.leaf(T::constant({1}, 3.0));
  const Var y = dot_constant(tape, x, T::constant({1}, 3.0));
  const Var sq = weighted_sum<double>(tape, std::vector<Var>{y}, std::vector<double>{1.0});
  tape.backward(sq);
  CHECK(tape.grad(x)[0] == 3.0);

  auto constant = [](const Eigen::VectorXd&, Eigen::VectorXd* g) {
    if (g) g->setZero();
    return 4.0;
  };
  CHECK(finite_diff_check(constant, Eigen::VectorXd::Random(5)) == 0.0);

  auto wrong = [](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
    if (g) (*g)[0] = 3 * x[0];
    return x[0] * x[0];
  };
  CHECK(finite_diff_check(wrong, Eigen::VectorXd::Constant(1, 3.0)) == doctest::Approx(0.5));
}

TEST_CASE("constant function leaves zero gradients") {
  Tape<double> tape;
  const Var a = tape.leaf(T::constant({3}, 2.0));
  const Var out = dot_constant(tape, a, T({3}));
  tape.backward(out);
  CHECK(tape.grad(a).values().isZero(0.0));
}

TEST_CASE("gradients accumulate across repeated uses") {
  Tape<double> tape;
  const Var a = tape.leaf(T::constant({2}, 1.5));
  const Var s = add(tape, a, a);
  tape.backward(dot_constant(tape, add(tape, s, a), T::constant({2}, 1.0)));
  CHECK(tape.grad(a)[0] == 3.0);
  CHECK(tape.grad(a)[1] == 3.0);
}

TEST_CASE("backward requires a scalar and is deterministic") {
  Rng rng(9);
  auto run = [&](std::uint64_t seed) {
    Rng r(seed);
    Tape<double> tape;
    const Var x = tape.leaf(random({2, 6, 6, 6}, r));
    const Var w = tape.leaf(random({3, 2, 3, 3, 3}, r));
    const Var y = relu(tape, conv3d(tape, x, w, Var{}, {1, 1, 1}));
    CHECK_THROWS_AS(tape.backward(y), ValidationError);
    tape.backward(dot_constant(tape, y, random({3, 6, 6, 6}, r)));
    return std::make_pair(tape.grad(x), tape.grad(w));
  };
  const auto a = run(12), b = run(12);
  CHECK(a.first.values() == b.first.values());
  CHECK(a.second.values() == b.second.values());
}

TEST_CASE("every primitive passes the f64 gradient suite") {
  for (const auto& r : run_gradcheck_suite(3)) {
    INFO(r.name);
    CHECK(r.max_error < kGradcheckTolerance);
    CHECK(r.coordinates > 0);
  }
}
