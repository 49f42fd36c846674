// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over Tensor<Scalar>, plus the
// primitive operations used by the segmentation model. Every op is a free
// function taking the tape first; outputs are recorded as new tape nodes.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "umseg/tensor.hpp"

namespace umseg {

/// Handle to a tape node. Default-constructed handles mean "absent".
struct Var {
  Index id = -1;
  bool valid() const { return id >= 0; }
};

template <typename Scalar>
class Tape {
 public:
  using TensorT = Tensor<Scalar>;
  using Backward = std::function<void(Tape&, Var self)>;

  Var leaf(TensorT value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, nullptr);
  }
  Var constant(TensorT value) { return push(std::move(value), false, nullptr); }

  /// Records an op output. The backward closure is dropped when no input
  /// needs a gradient.
  Var record(TensorT value, bool requires_grad, Backward backward) {
    return push(std::move(value), requires_grad, requires_grad ? std::move(backward) : nullptr);
  }

  const TensorT& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return v.valid() && nodes_.at(v.id).requires_grad; }
  bool has_grad(Var v) const { return nodes_.at(v.id).has_grad; }

  /// Gradient of the last backward() target with respect to v (zeros when
  /// v did not influence it).
  TensorT grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.has_grad ? n.grad : TensorT(n.value.shape());
  }

  /// Accumulation slot used by backward closures; allocated on first use.
  TensorT& grad_slot(Var v) {
    Node& n = nodes_.at(v.id);
    if (!n.has_grad) {
      n.grad = TensorT(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Reverse sweep from a scalar output. Clears gradients from any earlier
  /// sweep first.
  void backward(Var output) {
    if (value(output).size() != 1)
      throw ValidationError("backward target must be scalar, got shape " +
                            shape_string(value(output).shape()));
    for (Node& n : nodes_) {
      n.has_grad = false;
      n.grad = TensorT();
    }
    grad_slot(output)[0] = Scalar(1);
    for (Index i = output.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.has_grad && n.backward) n.backward(*this, Var{i});
    }
  }

  Index size() const { return static_cast<Index>(nodes_.size()); }

 private:
  struct Node {
    TensorT value;
    TensorT grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(TensorT value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), TensorT(), false, requires_grad, std::move(backward)});
    return Var{static_cast<Index>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

namespace detail {

template <typename Scalar>
bool any_requires_grad(const Tape<Scalar>& tape, std::initializer_list<Var> vars) {
  return std::any_of(vars.begin(), vars.end(), [&](Var v) { return tape.requires_grad(v); });
}

inline void require_shape(const Shape& got, const Shape& want, const char* what) {
  if (got != want)
    throw ValidationError(std::string(what) + ": shape " + shape_string(got) + " does not match " +
                          shape_string(want));
}

inline void require_rank(const Shape& got, std::size_t rank, const char* what) {
  if (got.size() != rank)
    throw ValidationError(std::string(what) + ": expected rank " + std::to_string(rank) +
                          ", got shape " + shape_string(got));
}

template <typename Scalar>
Scalar stable_sigmoid(Scalar x) {
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

/// For one axis: input coordinate feeding (output o, kernel tap t), or -1
/// when the tap falls in padding.
inline std::vector<Index> tap_table(Index in, Index out, Index k, Index stride, Index pad,
                                    Index dilation) {
  std::vector<Index> table(static_cast<std::size_t>(out * k));
  for (Index t = 0; t < k; ++t)
    for (Index o = 0; o < out; ++o) {
      const Index i = o * stride - pad + t * dilation;
      table[static_cast<std::size_t>(t * out + o)] = (i >= 0 && i < in) ? i : -1;
    }
  return table;
}

struct ConvGeometry {
  Index c_in = 0, kernel = 1;
  Dims3 in, out;
  std::vector<Index> tx, ty, tz;
};

template <typename Scalar>
void im2col(const Scalar* x, const ConvGeometry& g,
            Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& cols) {
  const Index k = g.kernel, n_out = g.out.voxels(), n_in = g.in.voxels();
  cols.resize(n_out, g.c_in * k * k * k);
  Index j = 0;
  for (Index ci = 0; ci < g.c_in; ++ci)
    for (Index kz = 0; kz < k; ++kz)
      for (Index ky = 0; ky < k; ++ky)
        for (Index kx = 0; kx < k; ++kx, ++j) {
          Scalar* col = cols.col(j).data();
          const Scalar* src = x + ci * n_in;
          const Index* iz = &g.tz[static_cast<std::size_t>(kz * g.out[2])];
          const Index* iy = &g.ty[static_cast<std::size_t>(ky * g.out[1])];
          const Index* ix = &g.tx[static_cast<std::size_t>(kx * g.out[0])];
          for (Index oz = 0; oz < g.out[2]; ++oz)
            for (Index oy = 0; oy < g.out[1]; ++oy) {
              const bool row_valid = iz[oz] >= 0 && iy[oy] >= 0;
              const Scalar* row = row_valid ? src + g.in[0] * (iy[oy] + g.in[1] * iz[oz]) : nullptr;
              for (Index ox = 0; ox < g.out[0]; ++ox)
                *col++ = (row_valid && ix[ox] >= 0) ? row[ix[ox]] : Scalar(0);
            }
        }
}

template <typename Scalar>
void col2im_add(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& cols,
                const ConvGeometry& g, Scalar* dx) {
  const Index k = g.kernel, n_in = g.in.voxels();
  Index j = 0;
  for (Index ci = 0; ci < g.c_in; ++ci)
    for (Index kz = 0; kz < k; ++kz)
      for (Index ky = 0; ky < k; ++ky)
        for (Index kx = 0; kx < k; ++kx, ++j) {
          const Scalar* col = cols.col(j).data();
          Scalar* dst = dx + ci * n_in;
          const Index* iz = &g.tz[static_cast<std::size_t>(kz * g.out[2])];
          const Index* iy = &g.ty[static_cast<std::size_t>(ky * g.out[1])];
          const Index* ix = &g.tx[static_cast<std::size_t>(kx * g.out[0])];
          for (Index oz = 0; oz < g.out[2]; ++oz)
            for (Index oy = 0; oy < g.out[1]; ++oy) {
              if (iz[oz] < 0 || iy[oy] < 0) {
                col += g.out[0];
                continue;
              }
              Scalar* row = dst + g.in[0] * (iy[oy] + g.in[1] * iz[oz]);
              for (Index ox = 0; ox < g.out[0]; ++ox, ++col)
                if (ix[ox] >= 0) row[ix[ox]] += *col;
            }
        }
}

}  // namespace detail

struct ConvOptions {
  Index stride = 1;
  Index padding = 0;
  Index dilation = 1;
};

/// Output extent of a convolution along one axis.
inline Index conv_extent(Index n, Index kernel, const ConvOptions& o) {
  const Index span = n + 2 * o.padding - o.dilation * (kernel - 1) - 1;
  return span < 0 ? 0 : span / o.stride + 1;
}

/// 3D cross-correlation. input {C_in, X, Y, Z}, kernel {C_out, C_in, k, k, k},
/// optional bias {C_out}.
template <typename Scalar>
Var conv3d(Tape<Scalar>& tape, Var input, Var kernel, Var bias, ConvOptions opt = {}) {
  using Matrix = typename Tensor<Scalar>::Matrix;
  const auto& x = tape.value(input);
  const auto& w = tape.value(kernel);
  detail::require_rank(x.shape(), 4, "conv3d input");
  detail::require_rank(w.shape(), 5, "conv3d kernel");
  const Index c_out = w.extent(0), k = w.extent(2);
  if (w.extent(1) != x.extent(0) || w.extent(3) != k || w.extent(4) != k)
    throw ValidationError("conv3d: kernel " + shape_string(w.shape()) + " incompatible with input " +
                          shape_string(x.shape()));
  if (bias.valid()) detail::require_shape(tape.value(bias).shape(), {c_out}, "conv3d bias");
  if (opt.stride < 1 || opt.dilation < 1 || opt.padding < 0)
    throw ValidationError("conv3d: stride and dilation must be >= 1, padding >= 0");

  auto geom = std::make_shared<detail::ConvGeometry>();
  geom->c_in = x.extent(0);
  geom->kernel = k;
  geom->in = x.spatial();
  for (int a = 0; a < 3; ++a) {
    geom->out[a] = conv_extent(geom->in[a], k, opt);
    if (geom->out[a] < 1)
      throw ValidationError("conv3d: input " + shape_string(x.shape()) + " smaller than kernel " +
                            shape_string(w.shape()) + " after padding");
  }
  geom->tx = detail::tap_table(geom->in[0], geom->out[0], k, opt.stride, opt.padding, opt.dilation);
  geom->ty = detail::tap_table(geom->in[1], geom->out[1], k, opt.stride, opt.padding, opt.dilation);
  geom->tz = detail::tap_table(geom->in[2], geom->out[2], k, opt.stride, opt.padding, opt.dilation);

  auto cols = std::make_shared<Matrix>();
  detail::im2col(x.data(), *geom, *cols);
  const Index taps = geom->c_in * k * k * k;
  Tensor<Scalar> out(volume_shape(c_out, geom->out));
  auto y = out.channels();
  y.noalias() = *cols * typename Tensor<Scalar>::ConstMatrixMap(w.data(), taps, c_out);
  if (bias.valid()) y.rowwise() += tape.value(bias).values().transpose();

  const bool grad = detail::any_requires_grad(tape, {input, kernel, bias});
  if (!grad || !tape.requires_grad(kernel)) cols.reset();
  return tape.record(std::move(out), grad,
                     [=](Tape<Scalar>& t, Var self) {
                       const auto& dy = t.grad_slot(self);
                       const auto dy_m = dy.channels();
                       if (t.requires_grad(kernel)) {
                         auto& dw = t.grad_slot(kernel);
                         typename Tensor<Scalar>::MatrixMap(dw.data(), taps, c_out).noalias() +=
                             cols->transpose() * dy_m;
                       }
                       if (t.requires_grad(bias)) t.grad_slot(bias).values() += dy_m.colwise().sum().transpose();
                       if (t.requires_grad(input)) {
                         const auto& wv = t.value(kernel);
                         Matrix dcols = dy_m * typename Tensor<Scalar>::ConstMatrixMap(wv.data(), taps, c_out).transpose();
                         detail::col2im_add(dcols, *geom, t.grad_slot(input).data());
                       }
                     });
}

/// Per-voxel affine channel map. input {C_in, X, Y, Z}, weights {C_out, C_in},
/// optional bias {C_out}. Equivalent to conv3d with a 1x1x1 kernel.
template <typename Scalar>
Var pointwise_conv(Tape<Scalar>& tape, Var input, Var weights, Var bias) {
  using ConstMap = typename Tensor<Scalar>::ConstMatrixMap;
  const auto& x = tape.value(input);
  const auto& w = tape.value(weights);
  detail::require_rank(x.shape(), 4, "pointwise_conv input");
  detail::require_rank(w.shape(), 2, "pointwise_conv weights");
  const Index c_in = x.extent(0), c_out = w.extent(0);
  if (w.extent(1) != c_in)
    throw ValidationError("pointwise_conv: weights " + shape_string(w.shape()) + " incompatible with input " +
                          shape_string(x.shape()));
  if (bias.valid()) detail::require_shape(tape.value(bias).shape(), {c_out}, "pointwise_conv bias");

  Tensor<Scalar> out(volume_shape(c_out, x.spatial()));
  out.channels().noalias() = x.channels() * ConstMap(w.data(), c_in, c_out);
  if (bias.valid()) out.channels().rowwise() += tape.value(bias).values().transpose();

  return tape.record(std::move(out), detail::any_requires_grad(tape, {input, weights, bias}),
                     [=](Tape<Scalar>& t, Var self) {
                       const auto& dy = t.grad_slot(self);
                       const auto dy_m = dy.channels();
                       if (t.requires_grad(weights)) {
                         auto& dw = t.grad_slot(weights);
                         typename Tensor<Scalar>::MatrixMap(dw.data(), c_in, c_out).noalias() +=
                             t.value(input).channels().transpose() * dy_m;
                       }
                       if (t.requires_grad(bias)) t.grad_slot(bias).values() += dy_m.colwise().sum().transpose();
                       if (t.requires_grad(input))
                         t.grad_slot(input).channels().noalias() +=
                             dy_m * ConstMap(t.value(weights).data(), c_in, c_out).transpose();
                     });
}

/// y = W x + b with x {n}, W {m, n}, b {m}.
template <typename Scalar>
Var linear(Tape<Scalar>& tape, Var x, Var weights, Var bias) {
  using ConstMap = typename Tensor<Scalar>::ConstMatrixMap;
  const auto& xv = tape.value(x);
  const auto& w = tape.value(weights);
  detail::require_rank(xv.shape(), 1, "linear input");
  detail::require_rank(w.shape(), 2, "linear weights");
  const Index m = w.extent(0), n = w.extent(1);
  if (xv.size() != n)
    throw ValidationError("linear: weights " + shape_string(w.shape()) + " incompatible with input " +
                          shape_string(xv.shape()));
  if (bias.valid()) detail::require_shape(tape.value(bias).shape(), {m}, "linear bias");

  Tensor<Scalar> out({m});
  out.values().noalias() = ConstMap(w.data(), n, m).transpose() * xv.values();
  if (bias.valid()) out.values() += tape.value(bias).values();

  return tape.record(std::move(out), detail::any_requires_grad(tape, {x, weights, bias}),
                     [=](Tape<Scalar>& t, Var self) {
                       const auto& dy = t.grad_slot(self);
                       if (t.requires_grad(weights)) {
                         auto& dw = t.grad_slot(weights);
                         typename Tensor<Scalar>::MatrixMap(dw.data(), n, m).noalias() +=
                             t.value(x).values() * dy.values().transpose();
                       }
                       if (t.requires_grad(bias)) t.grad_slot(bias).values() += dy.values();
                       if (t.requires_grad(x))
                         t.grad_slot(x).values().noalias() += ConstMap(t.value(weights).data(), n, m) * dy.values();
                     });
}

template <typename Scalar>
Var relu(Tape<Scalar>& tape, Var x) {
  Tensor<Scalar> out(tape.value(x).shape(), tape.value(x).values().cwiseMax(Scalar(0)));
  return tape.record(std::move(out), tape.requires_grad(x), [=](Tape<Scalar>& t, Var self) {
    const auto& dy = t.grad_slot(self);
    const auto& xv = t.value(x).values();
    auto& dx = t.grad_slot(x).values();
    for (Index i = 0; i < dx.size(); ++i)
      if (xv[i] > Scalar(0)) dx[i] += dy[i];
  });
}

template <typename Scalar>
Var sigmoid(Tape<Scalar>& tape, Var x) {
  const auto& xv = tape.value(x);
  Tensor<Scalar> out(xv.shape());
  for (Index i = 0; i < out.size(); ++i) out[i] = detail::stable_sigmoid(xv[i]);
  return tape.record(std::move(out), tape.requires_grad(x), [=](Tape<Scalar>& t, Var self) {
    const auto& dy = t.grad_slot(self);
    const auto& p = t.value(self).values();
    t.grad_slot(x).values().array() += dy.values().array() * p.array() * (Scalar(1) - p.array());
  });
}

enum class Activation { none, relu };

template <typename Scalar>
Var activate(Tape<Scalar>& tape, Var x, Activation mode) {
  return mode == Activation::relu ? relu(tape, x) : x;
}

template <typename Scalar>
Var add(Tape<Scalar>& tape, Var a, Var b) {
  detail::require_shape(tape.value(b).shape(), tape.value(a).shape(), "add");
  Tensor<Scalar> out(tape.value(a).shape(), tape.value(a).values() + tape.value(b).values());
  return tape.record(std::move(out), detail::any_requires_grad(tape, {a, b}), [=](Tape<Scalar>& t, Var self) {
    const auto& dy = t.grad_slot(self);
    if (t.requires_grad(a)) t.grad_slot(a).values() += dy.values();
    if (t.requires_grad(b)) t.grad_slot(b).values() += dy.values();
  });
}

/// Joins two vectors end to end.
template <typename Scalar>
Var concat(Tape<Scalar>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  detail::require_rank(av.shape(), 1, "concat lhs");
  detail::require_rank(bv.shape(), 1, "concat rhs");
  const Index na = av.size(), nb = bv.size();
  Tensor<Scalar> out({na + nb});
  out.values() << av.values(), bv.values();
  return tape.record(std::move(out), detail::any_requires_grad(tape, {a, b}), [=](Tape<Scalar>& t, Var self) {
    const auto& dy = t.grad_slot(self);
    if (t.requires_grad(a)) t.grad_slot(a).values() += dy.values().head(na);
    if (t.requires_grad(b)) t.grad_slot(b).values() += dy.values().tail(nb);
  });
}

/// {Ca, X, Y, Z} and {Cb, X, Y, Z} -> {Ca + Cb, X, Y, Z}.
template <typename Scalar>
Var concat_channels(Tape<Scalar>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  detail::require_rank(av.shape(), 4, "concat_channels lhs");
  detail::require_rank(bv.shape(), 4, "concat_channels rhs");
  if (av.spatial() != bv.spatial())
    throw ValidationError("concat_channels: spatial extents " + shape_string(av.shape()) + " and " +
                          shape_string(bv.shape()) + " differ");
  const Index na = av.size(), nb = bv.size();
  // Channels are outermost, so joining along them is a flat append.
  Tensor<Scalar> out(volume_shape(av.extent(0) + bv.extent(0), av.spatial()));
  out.values() << av.values(), bv.values();
  return tape.record(std::move(out), detail::any_requires_grad(tape, {a, b}), [=](Tape<Scalar>& t, Var self) {
    const auto& dy = t.grad_slot(self);
    if (t.requires_grad(a)) t.grad_slot(a).values() += dy.values().head(na);
    if (t.requires_grad(b)) t.grad_slot(b).values() += dy.values().tail(nb);
  });
}

/// Contiguous run of a vector, reshaped.
template <typename Scalar>
Var slice(Tape<Scalar>& tape, Var x, Index offset, Shape shape) {
  const auto& xv = tape.value(x);
  const Index n = shape_size(shape);
  if (offset < 0 || offset + n > xv.size())
    throw ValidationError("slice [" + std::to_string(offset) + ", " + std::to_string(offset + n) +
                          ") out of range for size " + std::to_string(xv.size()));
  Tensor<Scalar> out(std::move(shape), xv.values().segment(offset, n));
  return tape.record(std::move(out), tape.requires_grad(x), [=](Tape<Scalar>& t, Var self) {
    const auto& dy = t.grad_slot(self);
    t.grad_slot(x).values().segment(offset, n) += dy.values();
  });
}

/// {C, X, Y, Z} -> {C}: mean over voxels per channel.
template <typename Scalar>
Var global_avg_pool(Tape<Scalar>& tape, Var x) {
  const auto& xv = tape.value(x);
  detail::require_rank(xv.shape(), 4, "global_avg_pool");
  const Index voxels = xv.voxels();
  Tensor<Scalar> out({xv.extent(0)}, xv.channels().colwise().mean().transpose());
  return tape.record(std::move(out), tape.requires_grad(x), [=](Tape<Scalar>& t, Var self) {
    const auto& dy = t.grad_slot(self);
    t.grad_slot(x).channels().rowwise() += (dy.values() / Scalar(voxels)).transpose();
  });
}

/// Nearest-neighbour upsampling by an integer factor on every spatial axis.
template <typename Scalar>
Var upsample_nearest(Tape<Scalar>& tape, Var x, Index factor = 2) {
  const auto& xv = tape.value(x);
  detail::require_rank(xv.shape(), 4, "upsample_nearest");
  const Index c = xv.extent(0);
  const Dims3 in = xv.spatial();
  const Dims3 out_dims(in[0] * factor, in[1] * factor, in[2] * factor);
  Tensor<Scalar> out(volume_shape(c, out_dims));
  const Index n_in = in.voxels(), n_out = out_dims.voxels();
  for (Index ch = 0; ch < c; ++ch)
    for (Index z = 0; z < out_dims[2]; ++z)
      for (Index y = 0; y < out_dims[1]; ++y)
        for (Index x0 = 0; x0 < out_dims[0]; ++x0)
          out[ch * n_out + out_dims.offset(x0, y, z)] =
              xv[ch * n_in + in.offset(x0 / factor, y / factor, z / factor)];
  return tape.record(std::move(out), tape.requires_grad(x), [=](Tape<Scalar>& t, Var self) {
    const auto& dy = t.grad_slot(self);
    auto& dx = t.grad_slot(x);
    for (Index ch = 0; ch < c; ++ch)
      for (Index z = 0; z < out_dims[2]; ++z)
        for (Index y = 0; y < out_dims[1]; ++y)
          for (Index x0 = 0; x0 < out_dims[0]; ++x0)
            dx[ch * n_in + in.offset(x0 / factor, y / factor, z / factor)] +=
                dy[ch * n_out + out_dims.offset(x0, y, z)];
  });
}

/// Probability clamp applied inside bce().
template <typename Scalar>
constexpr Scalar bce_epsilon() {
  return Scalar(1e-7);
}

/// Mean binary cross-entropy over elements whose weight is nonzero.
/// `weights` may be empty (all elements count); otherwise it holds 0/1
/// per element of `prediction`.
template <typename Scalar>
Var bce(Tape<Scalar>& tape, Var prediction, const Tensor<Scalar>& target, const Tensor<Scalar>& weights = {}) {
  const auto& p = tape.value(prediction);
  detail::require_shape(target.shape(), p.shape(), "bce target");
  if (!weights.empty()) detail::require_shape(weights.shape(), p.shape(), "bce weights");
  const Scalar eps = bce_epsilon<Scalar>();
  const Scalar hi = Scalar(1) - eps;
  Scalar total(0);
  Index count = 0;
  for (Index i = 0; i < p.size(); ++i) {
    if (!weights.empty() && weights[i] == Scalar(0)) continue;
    const Scalar q = std::clamp(p[i], eps, hi);
    total -= target[i] * std::log(q) + (Scalar(1) - target[i]) * std::log(Scalar(1) - q);
    ++count;
  }
  if (count == 0) throw ValidationError("bce: every element is masked, mean undefined");
  Tensor<Scalar> out({1});
  out[0] = total / Scalar(count);
  return tape.record(std::move(out), tape.requires_grad(prediction), [=](Tape<Scalar>& t, Var self) {
    const Scalar g = t.grad(self)[0] / Scalar(count);
    const auto& pv = t.value(prediction);
    auto& dp = t.grad_slot(prediction);
    for (Index i = 0; i < pv.size(); ++i) {
      if (!weights.empty() && weights[i] == Scalar(0)) continue;
      if (pv[i] < eps || pv[i] > hi) continue;
      dp[i] += g * (-target[i] / pv[i] + (Scalar(1) - target[i]) / (Scalar(1) - pv[i]));
    }
  });
}

/// 1 - (2 sum(p y) + s) / (sum(p) + sum(y) + s).
template <typename Scalar>
Var soft_dice_loss(Tape<Scalar>& tape, Var prediction, const Tensor<Scalar>& target, Scalar smooth = Scalar(1)) {
  const auto& p = tape.value(prediction);
  detail::require_shape(target.shape(), p.shape(), "soft_dice_loss target");
  const Scalar inter = p.values().dot(target.values());
  const Scalar denom = p.values().sum() + target.values().sum() + smooth;
  Tensor<Scalar> out({1});
  out[0] = Scalar(1) - (Scalar(2) * inter + smooth) / denom;
  return tape.record(std::move(out), tape.requires_grad(prediction), [=](Tape<Scalar>& t, Var self) {
    const Scalar g = t.grad(self)[0];
    const Scalar num = Scalar(2) * inter + smooth;
    t.grad_slot(prediction).values().array() +=
        g * (num / (denom * denom) - Scalar(2) * target.values().array() / denom);
  });
}

/// sum_i weights[i] * terms[i] over scalar nodes.
template <typename Scalar>
Var weighted_sum(Tape<Scalar>& tape, std::span<const Var> terms, std::span<const Scalar> weights) {
  if (terms.size() != weights.size() || terms.empty())
    throw ValidationError("weighted_sum: need matching nonempty term and weight lists");
  Tensor<Scalar> out({1});
  bool grad = false;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    detail::require_shape(tape.value(terms[i]).shape(), {1}, "weighted_sum term");
    out[0] += weights[i] * tape.value(terms[i])[0];
    grad = grad || tape.requires_grad(terms[i]);
  }
  std::vector<Var> ts(terms.begin(), terms.end());
  std::vector<Scalar> ws(weights.begin(), weights.end());
  return tape.record(std::move(out), grad, [ts, ws](Tape<Scalar>& t, Var self) {
    const Scalar g = t.grad(self)[0];
    for (std::size_t i = 0; i < ts.size(); ++i)
      if (t.requires_grad(ts[i])) t.grad_slot(ts[i])[0] += ws[i] * g;
  });
}

/// Mean of scalar nodes.
template <typename Scalar>
Var mean(Tape<Scalar>& tape, std::span<const Var> terms) {
  std::vector<Scalar> w(terms.size(), Scalar(1) / Scalar(std::max<std::size_t>(terms.size(), 1)));
  return weighted_sum<Scalar>(tape, terms, w);
}

/// <x, r> for a constant tensor r of the same shape; reduces any output to a
/// scalar for gradient checks.
template <typename Scalar>
Var dot_constant(Tape<Scalar>& tape, Var x, const Tensor<Scalar>& r) {
  detail::require_shape(r.shape(), tape.value(x).shape(), "dot_constant");
  Tensor<Scalar> out({1});
  out[0] = tape.value(x).values().dot(r.values());
  return tape.record(std::move(out), tape.requires_grad(x), [=](Tape<Scalar>& t, Var self) {
    t.grad_slot(x).values() += t.grad(self)[0] * r.values();
  });
}

}  // namespace umseg
