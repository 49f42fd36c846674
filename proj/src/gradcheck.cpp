// SPDX-License-Identifier: Apache-2.0
#include "umseg/gradcheck.hpp"

#include <functional>

#include "umseg/training.hpp"

namespace umseg {

namespace {

using Build = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Checks d<build(inputs), r>/d(inputs) for a fixed random r.
GradcheckResult check_op(const std::string& name, std::vector<Tensor<double>> inputs, const Build& build, Rng& rng) {
  Tensor<double> probe;
  {
    Tape<double> tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t, false));
    probe = random_tensor(tape.value(build(tape, vars)).shape(), rng);
  }
  Eigen::VectorXd x0(0);
  for (const auto& t : inputs) {
    x0.conservativeResize(x0.size() + t.size());
    x0.tail(t.size()) = t.values();
  }
  auto f = [&](const Eigen::VectorXd& x, Eigen::VectorXd* grad) {
    Tape<double> tape;
    std::vector<Var> vars;
    Index off = 0;
    for (const auto& t : inputs) {
      vars.push_back(tape.leaf(Tensor<double>(t.shape(), x.segment(off, t.size())), true));
      off += t.size();
    }
    Var out = build(tape, vars);
    if (tape.value(out).shape() != Shape{1}) out = dot_constant(tape, out, probe);
    const double value = tape.value(out)[0];
    if (grad) {
      tape.backward(out);
      off = 0;
      for (const Var v : vars) {
        const auto g = tape.grad(v);
        grad->segment(off, g.size()) = g.values();
        off += g.size();
      }
    }
    return value;
  };
  return {name, finite_diff_check(f, x0), x0.size()};
}

// Values bounded away from zero so relu kinks stay out of the stencil.
Tensor<double> away_from_zero(Shape shape, Rng& rng) {
  Tensor<double> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.05, 1.0);
  return t;
}

GradcheckResult check_model(const std::string& name, BackboneKind kind, std::uint64_t seed) {
  const Index c = 8;
  const int k_count = 4;
  Rng rng(seed, 7);
  ModelConfig cfg;
  cfg.backbone.kind = kind;
  cfg.backbone.base_channels = 4;
  cfg.backbone.width = 8;
  cfg.backbone.feature_channels = c;
  cfg.backbone.stages = 2;
  SynthSpec spec;
  spec.names = {"a", "b", "c", "d"};
  spec.groups = {2, 2};
  spec.dimension = 8;
  UniversalModel<double> model(cfg, synth_embeddings(seed, spec), seed);

  const Dims3 d(8, 8, 8);
  CaseSample sample;
  sample.case_id = "gradcheck";
  sample.image = Grid<float>(d);
  for (auto& v : sample.image.data) v = static_cast<float>(rng.uniform());
  sample.masks.dims = d;
  sample.availability = AvailabilityMask(k_count);
  for (int k : {1, 3}) {
    Mask m(d);
    for (auto& v : m.data) v = rng.bernoulli(0.4) ? 1 : 0;
    sample.masks.masks.emplace(k, std::move(m));
    sample.availability.set(k);
  }
  const std::vector<CaseSample> batch{sample};

  auto& params = model.parameters();
  Eigen::VectorXd x0(params.scalar_count());
  std::vector<Index> coords;
  Index off = 0;
  for (const auto& t : params.values) {
    x0.segment(off, t.size()) = t.values();
    const Index picks = std::min<Index>(t.size(), 16);
    for (Index i = 0; i < picks; ++i) coords.push_back(off + (picks == t.size() ? i : rng.below(t.size())));
    off += t.size();
  }
  auto f = [&](const Eigen::VectorXd& x, Eigen::VectorXd* grad) {
    Index o = 0;
    for (auto& t : params.values) {
      t.values() = x.segment(o, t.size());
      o += t.size();
    }
    const auto r = compute_gradients(model, std::span<const CaseSample>(batch));
    if (grad) {
      o = 0;
      for (const auto& g : r.grads) {
        grad->segment(o, g.size()) = g.values();
        o += g.size();
      }
    }
    return r.loss;
  };
  return {name, finite_diff_check(f, x0, 1e-6, coords), static_cast<Index>(coords.size())};
}

}  // namespace

std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed) {
  Rng rng(seed, 1);
  std::vector<GradcheckResult> out;
  auto conv = [&](const std::string& name, Index c_in, Index c_out, Index k, Index n, ConvOptions opt) {
    out.push_back(check_op(name,
                           {random_tensor({c_in, n, n, n}, rng), random_tensor({c_out, c_in, k, k, k}, rng),
                            random_tensor({c_out}, rng)},
                           [opt](Tape<double>& t, const std::vector<Var>& v) { return conv3d(t, v[0], v[1], v[2], opt); },
                           rng));
  };
  conv("conv3d", 2, 3, 3, 5, {1, 1, 1});
  conv("conv3d/stride2", 2, 2, 3, 6, {2, 1, 1});
  conv("conv3d/dilation2", 2, 2, 3, 6, {1, 2, 2});
  conv("conv3d/k2-nopad", 1, 2, 2, 4, {1, 0, 1});
  out.push_back(check_op("pointwise_conv",
                         {random_tensor({3, 3, 2, 2}, rng), random_tensor({4, 3}, rng), random_tensor({4}, rng)},
                         [](Tape<double>& t, const std::vector<Var>& v) { return pointwise_conv(t, v[0], v[1], v[2]); },
                         rng));
  out.push_back(check_op("linear", {random_tensor({5}, rng), random_tensor({3, 5}, rng), random_tensor({3}, rng)},
                         [](Tape<double>& t, const std::vector<Var>& v) { return linear(t, v[0], v[1], v[2]); }, rng));
  out.push_back(check_op("relu", {away_from_zero({2, 3, 3, 3}, rng)},
                         [](Tape<double>& t, const std::vector<Var>& v) { return relu(t, v[0]); }, rng));
  out.push_back(check_op("sigmoid", {random_tensor({2, 3, 3, 3}, rng, -4.0, 4.0)},
                         [](Tape<double>& t, const std::vector<Var>& v) { return sigmoid(t, v[0]); }, rng));
  out.push_back(check_op("add", {random_tensor({2, 2, 2, 2}, rng), random_tensor({2, 2, 2, 2}, rng)},
                         [](Tape<double>& t, const std::vector<Var>& v) { return add(t, v[0], v[1]); }, rng));
  out.push_back(check_op("concat", {random_tensor({4}, rng), random_tensor({3}, rng)},
                         [](Tape<double>& t, const std::vector<Var>& v) { return concat(t, v[0], v[1]); }, rng));
  out.push_back(check_op("concat_channels", {random_tensor({2, 2, 3, 2}, rng), random_tensor({1, 2, 3, 2}, rng)},
                         [](Tape<double>& t, const std::vector<Var>& v) { return concat_channels(t, v[0], v[1]); },
                         rng));
  out.push_back(check_op("slice", {random_tensor({12}, rng)},
                         [](Tape<double>& t, const std::vector<Var>& v) { return slice(t, v[0], 3, {2, 3}); }, rng));
  out.push_back(check_op("global_avg_pool", {random_tensor({3, 3, 2, 4}, rng)},
                         [](Tape<double>& t, const std::vector<Var>& v) { return global_avg_pool(t, v[0]); }, rng));
  out.push_back(check_op("upsample_nearest", {random_tensor({2, 2, 3, 2}, rng)},
                         [](Tape<double>& t, const std::vector<Var>& v) { return upsample_nearest(t, v[0], 2); }, rng));

  Tensor<double> target({1, 3, 3, 3}), weights({1, 3, 3, 3});
  for (Index i = 0; i < target.size(); ++i) {
    target[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    weights[i] = rng.bernoulli(0.7) ? 1.0 : 0.0;
  }
  weights[0] = 1.0;
  out.push_back(check_op("bce", {random_tensor({1, 3, 3, 3}, rng, 0.05, 0.95)},
                         [=](Tape<double>& t, const std::vector<Var>& v) { return bce(t, v[0], target); }, rng));
  out.push_back(check_op("bce/weighted", {random_tensor({1, 3, 3, 3}, rng, 0.05, 0.95)},
                         [=](Tape<double>& t, const std::vector<Var>& v) { return bce(t, v[0], target, weights); }, rng));
  out.push_back(check_op("soft_dice_loss", {random_tensor({1, 3, 3, 3}, rng, 0.05, 0.95)},
                         [=](Tape<double>& t, const std::vector<Var>& v) { return soft_dice_loss(t, v[0], target); }, rng));
  out.push_back(check_op("weighted_sum", {random_tensor({1}, rng), random_tensor({1}, rng), random_tensor({1}, rng)},
                         [](Tape<double>& t, const std::vector<Var>& v) {
                           const std::vector<double> w{0.5, -2.0, 1.5};
                           return weighted_sum<double>(t, v, w);
                         },
                         rng));

  out.push_back(check_model("model/encoder-decoder", BackboneKind::encoder_decoder, seed));
  out.push_back(check_model("model/dilated", BackboneKind::dilated, seed));
  return out;
}

}  // namespace umseg
