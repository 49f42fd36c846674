// SPDX-License-Identifier: Apache-2.0
//
// Universal segmentation model: a pluggable vision backbone producing a
// full-resolution feature map F and a global feature f, a controller that
// maps [class embedding ; f] to the parameters of a per-class dynamic head,
// and the dynamic head itself (three pointwise convolutions and a sigmoid).
#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "umseg/autodiff.hpp"
#include "umseg/embedding.hpp"

namespace umseg {

// ------------------------------------------------------------- parameters

template <typename Scalar>
struct ParameterSet {
  std::vector<std::string> names;
  std::vector<Tensor<Scalar>> values;

  Index add(std::string name, Tensor<Scalar> value) {
    for (const auto& n : names)
      if (n == name) throw ValidationError("duplicate parameter '" + name + "'");
    names.push_back(std::move(name));
    values.push_back(std::move(value));
    return static_cast<Index>(values.size()) - 1;
  }
  Index size() const { return static_cast<Index>(values.size()); }
  Index index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<Index>(i);
    throw ValidationError("no parameter named '" + name + "'");
  }
  Tensor<Scalar>& operator[](Index i) { return values.at(static_cast<std::size_t>(i)); }
  const Tensor<Scalar>& operator[](Index i) const { return values.at(static_cast<std::size_t>(i)); }
  Index scalar_count() const {
    Index n = 0;
    for (const auto& v : values) n += v.size();
    return n;
  }
  template <typename Other>
  ParameterSet<Other> cast() const {
    ParameterSet<Other> out;
    out.names = names;
    for (const auto& v : values) out.values.push_back(v.template cast<Other>());
    return out;
  }
};

/// Puts every parameter on the tape as a leaf.
template <typename Scalar>
std::vector<Var> bind_parameters(Tape<Scalar>& tape, const ParameterSet<Scalar>& params, bool requires_grad) {
  std::vector<Var> out;
  out.reserve(params.values.size());
  for (const auto& v : params.values) out.push_back(tape.leaf(v, requires_grad));
  return out;
}

template <typename Scalar>
Tensor<Scalar> he_normal(Shape shape, Index fan_in, Rng& rng, double gain = 2.0) {
  Tensor<Scalar> t(std::move(shape));
  const double std_dev = std::sqrt(gain / static_cast<double>(fan_in));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(std_dev * rng.normal());
  return t;
}

// --------------------------------------------------------------- backbones

enum class BackboneKind { encoder_decoder, dilated };

std::string to_string(BackboneKind kind);
BackboneKind parse_backbone_kind(const std::string& text);
std::string to_string(Activation act);
Activation parse_activation(const std::string& text);

struct BackboneConfig {
  BackboneKind kind = BackboneKind::encoder_decoder;
  Index base_channels = 8;
  Index width = 16;
  /// C: channels of the feature map handed to the dynamic head.
  Index feature_channels = 8;
  /// Stride-2 stages (encoder-decoder only).
  Index stages = 3;
};

struct BackboneOutput {
  Var features;  // F: {C, X, Y, Z}, same spatial extent as the input
  Var global;    // f: {C_g}, average pool of the last encoder stage
};

/// Contract every vision backbone satisfies: volume {1, X, Y, Z} in,
/// (F, f) out with fixed channel counts and spatial ratio 1.
template <typename Scalar>
class Backbone {
 public:
  virtual ~Backbone() = default;

  virtual const BackboneConfig& config() const = 0;
  Index feature_channels() const { return config().feature_channels; }
  virtual Index global_channels() const = 0;
  /// Input extents must be multiples of this.
  virtual Index spatial_divisor() const = 0;
  /// Registers parameters (names prefixed "backbone.") with initial values.
  virtual void declare(ParameterSet<Scalar>& params, Rng& rng) = 0;
  virtual BackboneOutput forward(Tape<Scalar>& tape, Var input, std::span<const Var> bound) const = 0;
  virtual std::unique_ptr<Backbone> clone() const = 0;
};

namespace detail {

struct ConvSlot {
  Index weight = -1, bias = -1;
};

template <typename Scalar>
ConvSlot declare_conv(ParameterSet<Scalar>& params, const std::string& name, Index c_in, Index c_out, Index k,
                      Rng& rng) {
  ConvSlot s;
  s.weight = params.add(name + ".weight", he_normal<Scalar>({c_out, c_in, k, k, k}, c_in * k * k * k, rng));
  s.bias = params.add(name + ".bias", Tensor<Scalar>({c_out}));
  return s;
}

template <typename Scalar>
Var conv_relu(Tape<Scalar>& tape, Var x, const ConvSlot& s, std::span<const Var> bound, ConvOptions opt) {
  return relu(tape, conv3d(tape, x, bound[static_cast<std::size_t>(s.weight)],
                           bound[static_cast<std::size_t>(s.bias)], opt));
}

}  // namespace detail

/// U-shaped CNN: stem, `stages` stride-2 encoder convolutions, then
/// nearest-upsample + conv decoder with additive skips back to full
/// resolution, and a final conv to C channels.
template <typename Scalar>
class EncoderDecoderBackbone final : public Backbone<Scalar> {
 public:
  explicit EncoderDecoderBackbone(BackboneConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.kind = BackboneKind::encoder_decoder;
    if (cfg_.stages < 1) throw ValidationError("encoder-decoder backbone needs at least one stage");
  }

  const BackboneConfig& config() const override { return cfg_; }
  Index global_channels() const override { return cfg_.width; }
  Index spatial_divisor() const override { return Index{1} << cfg_.stages; }

  void declare(ParameterSet<Scalar>& params, Rng& rng) override {
    stem_ = detail::declare_conv(params, "backbone.stem", 1, cfg_.base_channels, 3, rng);
    down_.clear();
    up_.clear();
    for (Index i = 0; i < cfg_.stages; ++i)
      down_.push_back(detail::declare_conv(params, "backbone.down" + std::to_string(i + 1),
                                           i == 0 ? cfg_.base_channels : cfg_.width, cfg_.width, 3, rng));
    for (Index i = cfg_.stages; i >= 1; --i)
      up_.push_back(detail::declare_conv(params, "backbone.up" + std::to_string(i), cfg_.width,
                                         i == 1 ? cfg_.base_channels : cfg_.width, 3, rng));
    head_ = detail::declare_conv(params, "backbone.head", cfg_.base_channels, cfg_.feature_channels, 3, rng);
  }

  BackboneOutput forward(Tape<Scalar>& tape, Var input, std::span<const Var> bound) const override {
    const ConvOptions same{1, 1, 1}, down{2, 1, 1};
    std::vector<Var> skips{detail::conv_relu(tape, input, stem_, bound, same)};
    for (const auto& s : down_) skips.push_back(detail::conv_relu(tape, skips.back(), s, bound, down));
    const Var global = global_avg_pool(tape, skips.back());
    Var x = skips.back();
    for (std::size_t i = 0; i < up_.size(); ++i) {
      const Var skip = skips[skips.size() - 2 - i];
      x = add(tape, detail::conv_relu(tape, upsample_nearest(tape, x, 2), up_[i], bound, same), skip);
    }
    return {detail::conv_relu(tape, x, head_, bound, same), global};
  }

  std::unique_ptr<Backbone<Scalar>> clone() const override {
    return std::make_unique<EncoderDecoderBackbone>(*this);
  }

 private:
  BackboneConfig cfg_;
  detail::ConvSlot stem_, head_;
  std::vector<detail::ConvSlot> down_, up_;
};

/// Single-resolution CNN with dilations 1, 2, 4; the head sees the first
/// layer's features alongside the dilated context.
template <typename Scalar>
class DilatedBackbone final : public Backbone<Scalar> {
 public:
  explicit DilatedBackbone(BackboneConfig cfg) : cfg_(std::move(cfg)) { cfg_.kind = BackboneKind::dilated; }

  const BackboneConfig& config() const override { return cfg_; }
  Index global_channels() const override { return cfg_.width; }
  Index spatial_divisor() const override { return 1; }

  void declare(ParameterSet<Scalar>& params, Rng& rng) override {
    c1_ = detail::declare_conv(params, "backbone.conv1", 1, cfg_.base_channels, 3, rng);
    c2_ = detail::declare_conv(params, "backbone.conv2", cfg_.base_channels, cfg_.width, 3, rng);
    c3_ = detail::declare_conv(params, "backbone.conv3", cfg_.width, cfg_.width, 3, rng);
    head_ = detail::declare_conv(params, "backbone.head", cfg_.base_channels + cfg_.width, cfg_.feature_channels, 3,
                                 rng);
  }

  BackboneOutput forward(Tape<Scalar>& tape, Var input, std::span<const Var> bound) const override {
    const Var early = detail::conv_relu(tape, input, c1_, bound, {1, 1, 1});
    Var x = detail::conv_relu(tape, early, c2_, bound, {1, 2, 2});
    x = detail::conv_relu(tape, x, c3_, bound, {1, 4, 4});
    const Var global = global_avg_pool(tape, x);
    return {detail::conv_relu(tape, concat_channels(tape, early, x), head_, bound, {1, 1, 1}), global};
  }

  std::unique_ptr<Backbone<Scalar>> clone() const override { return std::make_unique<DilatedBackbone>(*this); }

 private:
  BackboneConfig cfg_;
  detail::ConvSlot c1_, c2_, c3_, head_;
};

template <typename Scalar>
std::unique_ptr<Backbone<Scalar>> make_backbone(const BackboneConfig& cfg) {
  switch (cfg.kind) {
    case BackboneKind::encoder_decoder: return std::make_unique<EncoderDecoderBackbone<Scalar>>(cfg);
    case BackboneKind::dilated: return std::make_unique<DilatedBackbone<Scalar>>(cfg);
  }
  throw ValidationError("unknown backbone kind");
}

// ------------------------------------------------------- controller / head

/// Channels of the two hidden dynamic layers.
inline constexpr Index kHeadHidden = 8;
/// Initial hidden-layer bias of the dynamic head; slightly positive so rare
/// classes do not start with every ReLU unit off.
inline constexpr double kHiddenBiasInit = 0.1;

/// Dynamic parameters per class for feature width C: 8C + 89.
constexpr Index dynamic_parameter_count(Index feature_channels) {
  return (feature_channels * kHeadHidden + kHeadHidden) + (kHeadHidden * kHeadHidden + kHeadHidden) +
         (kHeadHidden + 1);
}

/// Per-class head parameters cut from the controller output.
struct HeadParams {
  Var w1, b1, w2, b2, w3, b3;
};

/// theta = W [embedding ; global] + b, split in the order w1, b1, w2, b2,
/// w3, b3 with shapes {8,C}, {8}, {8,8}, {8}, {1,8}, {1}.
template <typename Scalar>
HeadParams controller_forward(Tape<Scalar>& tape, Var embedding, Var global, Var weight, Var bias,
                              Index feature_channels) {
  const Index n = dynamic_parameter_count(feature_channels);
  const auto& w = tape.value(weight);
  const Index in = tape.value(embedding).size() + tape.value(global).size();
  if (w.rank() != 2 || w.extent(0) != n || w.extent(1) != in)
    throw ValidationError("controller weight " + shape_string(w.shape()) + " does not match expected [" +
                          std::to_string(n) + "," + std::to_string(in) + "]");
  const Var theta = linear(tape, concat(tape, embedding, global), weight, bias);
  const Index c = feature_channels, h = kHeadHidden;
  HeadParams p;
  Index off = 0;
  auto take = [&](Shape shape) {
    const Var v = slice(tape, theta, off, shape);
    off += shape_size(shape);
    return v;
  };
  p.w1 = take({h, c});
  p.b1 = take({h});
  p.w2 = take({h, h});
  p.b2 = take({h});
  p.w3 = take({1, h});
  p.b3 = take({1});
  return p;
}

/// P = sigmoid(((F * w1 + b1) -> act -> * w2 + b2) -> act -> * w3 + b3).
template <typename Scalar>
Var segmentor_forward(Tape<Scalar>& tape, Var features, const HeadParams& p, Activation act = Activation::relu) {
  Var x = activate(tape, pointwise_conv(tape, features, p.w1, p.b1), act);
  x = activate(tape, pointwise_conv(tape, x, p.w2, p.b2), act);
  return sigmoid(tape, pointwise_conv(tape, x, p.w3, p.b3));
}

// ------------------------------------------------------------------- model

struct ModelConfig {
  BackboneConfig backbone;
  Activation head_activation = Activation::relu;
  /// Standard deviation of the controller weight at initialization.
  double controller_init_std = 0.1;
};

template <typename Scalar>
class UniversalModel {
 public:
  UniversalModel(ModelConfig cfg, const EmbeddingTable& embeddings, std::uint64_t seed)
      : cfg_(std::move(cfg)), backbone_(make_backbone<Scalar>(cfg_.backbone)) {
    if (embeddings.classes() < 1 || embeddings.dimension() < 1)
      throw ValidationError("model needs a nonempty embedding table");
    if (static_cast<Index>(embeddings.names.size()) != embeddings.classes())
      throw ValidationError("embedding table names do not match its rows");
    Rng rng(seed);
    backbone_->declare(params_, rng);
    const Index c = backbone_->feature_channels();
    const Index n = dynamic_parameter_count(c);
    const Index in = embeddings.dimension() + backbone_->global_channels();
    Tensor<Scalar> w({n, in});
    for (Index i = 0; i < w.size(); ++i) w[i] = static_cast<Scalar>(cfg_.controller_init_std * rng.normal());
    controller_weight_ = params_.add("controller.weight", std::move(w));
    controller_bias_ = params_.add("controller.bias", initial_head(c, rng));
    set_embeddings(embeddings);
  }

  UniversalModel(const UniversalModel& o)
      : cfg_(o.cfg_),
        backbone_(o.backbone_->clone()),
        params_(o.params_),
        embeddings_(o.embeddings_),
        class_vectors_(o.class_vectors_),
        controller_weight_(o.controller_weight_),
        controller_bias_(o.controller_bias_) {}
  UniversalModel& operator=(const UniversalModel& o) {
    if (this != &o) *this = UniversalModel(o);
    return *this;
  }
  UniversalModel(UniversalModel&&) noexcept = default;
  UniversalModel& operator=(UniversalModel&&) noexcept = default;

  const ModelConfig& config() const { return cfg_; }
  const Backbone<Scalar>& backbone() const { return *backbone_; }
  ParameterSet<Scalar>& parameters() { return params_; }
  const ParameterSet<Scalar>& parameters() const { return params_; }
  Index controller_weight() const { return controller_weight_; }
  Index controller_bias() const { return controller_bias_; }

  Index classes() const { return static_cast<Index>(embeddings_.names.size()); }
  Index embedding_dim() const { return embeddings_.dimension(); }
  const EmbeddingTable& embeddings() const { return embeddings_; }
  const Tensor<Scalar>& class_vector(Index slot) const { return class_vectors_.at(static_cast<std::size_t>(slot)); }

  /// Rebinds the class embeddings; the dimension must stay the same.
  void set_embeddings(const EmbeddingTable& table) {
    if (!embeddings_.names.empty() && table.dimension() != embeddings_.dimension())
      throw ValidationError("embedding dimension " + std::to_string(table.dimension()) +
                            " does not match the controller input " + std::to_string(embeddings_.dimension()));
    if (!table.vectors.allFinite()) throw ValidationError("embedding table holds non-finite values");
    embeddings_ = table;
    class_vectors_.clear();
    for (Index k = 0; k < table.classes(); ++k)
      class_vectors_.emplace_back(Shape{table.dimension()}, table.vectors.row(k).transpose().template cast<Scalar>());
  }

  /// Same structure with parameters cast to another scalar type.
  template <typename Other>
  UniversalModel<Other> cast() const {
    UniversalModel<Other> out(cfg_, embeddings_, 0);
    out.parameters() = params_.template cast<Other>();
    return out;
  }

 private:
  // Controller bias starts at a He-initialized head so every class begins
  // from a usable dynamic head.
  static Tensor<Scalar> initial_head(Index c, Rng& rng) {
    Tensor<Scalar> b({dynamic_parameter_count(c)});
    const Index h = kHeadHidden;
    Index off = 0;
    auto fill = [&](Index count, Index fan_in, double gain) {
      const double s = std::sqrt(gain / static_cast<double>(fan_in));
      for (Index i = 0; i < count; ++i) b[off++] = static_cast<Scalar>(s * rng.normal());
    };
    auto constant = [&](Index count, double v) {
      for (Index i = 0; i < count; ++i) b[off++] = static_cast<Scalar>(v);
    };
    fill(h * c, c, 2.0);
    constant(h, kHiddenBiasInit);
    fill(h * h, h, 2.0);
    constant(h, kHiddenBiasInit);
    fill(h, h, 1.0);
    return b;
  }

  ModelConfig cfg_;
  std::unique_ptr<Backbone<Scalar>> backbone_;
  ParameterSet<Scalar> params_;
  EmbeddingTable embeddings_;
  std::vector<Tensor<Scalar>> class_vectors_;
  Index controller_weight_ = -1;
  Index controller_bias_ = -1;
};

/// Tape nodes of one forward pass.
struct ForwardPass {
  std::vector<Var> params;
  Var features;
  Var global;
  /// One probability map {1, X, Y, Z} per class slot; invalid for classes
  /// that were not requested.
  std::vector<Var> probabilities;
};

/// Runs the backbone once on `input` ({1, X, Y, Z}) and the controller and
/// head for each requested class slot (all when `slots` is empty).
/// `bound` reuses parameters already on the tape; empty binds fresh leaves.
template <typename Scalar>
ForwardPass forward(Tape<Scalar>& tape, const UniversalModel<Scalar>& model, Var input,
                    std::span<const Index> slots = {}, bool requires_grad = true,
                    std::span<const Var> bound = {}) {
  const auto& x = tape.value(input);
  if (x.rank() != 4 || x.extent(0) != 1)
    throw ValidationError("model input must be {1, X, Y, Z}, got " + shape_string(x.shape()));
  const Index div = model.backbone().spatial_divisor();
  for (int a = 0; a < 3; ++a)
    if (x.spatial()[a] % div != 0)
      throw ValidationError("input extents " + to_string(x.spatial()) + " must be multiples of " + std::to_string(div));
  ForwardPass pass;
  pass.params = bound.empty() ? bind_parameters(tape, model.parameters(), requires_grad)
                              : std::vector<Var>(bound.begin(), bound.end());
  const auto out = model.backbone().forward(tape, input, pass.params);
  pass.features = out.features;
  pass.global = out.global;
  pass.probabilities.assign(static_cast<std::size_t>(model.classes()), Var{});
  std::vector<Index> wanted(slots.begin(), slots.end());
  if (wanted.empty())
    for (Index k = 0; k < model.classes(); ++k) wanted.push_back(k);
  const Var weight = pass.params[static_cast<std::size_t>(model.controller_weight())];
  const Var bias = pass.params[static_cast<std::size_t>(model.controller_bias())];
  for (Index k : wanted) {
    if (k < 0 || k >= model.classes()) throw ValidationError("class slot " + std::to_string(k) + " out of range");
    const Var w = tape.constant(model.class_vector(k));
    const HeadParams head = controller_forward(tape, w, pass.global, weight, bias, model.backbone().feature_channels());
    pass.probabilities[static_cast<std::size_t>(k)] =
        segmentor_forward(tape, pass.features, head, model.config().head_activation);
  }
  return pass;
}

struct PredictOptions {
  /// Values outside [0, 1] beyond this slack produce a warning.
  double range_slack = 1e-6;
};

template <typename Scalar>
struct Prediction {
  Tensor<Scalar> probabilities;  // {K, X, Y, Z}
  std::vector<std::string> warnings;
};

/// All K probability maps for a preprocessed volume {1, X, Y, Z}. Inputs
/// whose extents are not multiples of the backbone divisor are zero-padded
/// and the output cropped back.
template <typename Scalar>
Prediction<Scalar> predict_all(const UniversalModel<Scalar>& model, const Tensor<Scalar>& volume,
                               const PredictOptions& opt = {}) {
  if (volume.rank() != 4 || volume.extent(0) != 1)
    throw ValidationError("predict_all expects a {1, X, Y, Z} volume, got " + shape_string(volume.shape()));
  Prediction<Scalar> out;
  if (!volume.all_finite()) throw RuntimeFailure("input volume holds non-finite values");
  const Scalar lo = volume.values().minCoeff(), hi = volume.values().maxCoeff();
  if (lo < Scalar(-opt.range_slack) || hi > Scalar(1 + opt.range_slack))
    out.warnings.push_back("input values span [" + std::to_string(lo) + ", " + std::to_string(hi) +
                           "], expected a normalized [0, 1] volume");

  const Dims3 d = volume.spatial();
  const Index div = model.backbone().spatial_divisor();
  Dims3 padded = d;
  for (int a = 0; a < 3; ++a) padded[a] = (d[a] + div - 1) / div * div;
  Tensor<Scalar> input = volume;
  if (padded != d) {
    input = Tensor<Scalar>(volume_shape(1, padded));
    for (Index z = 0; z < d[2]; ++z)
      for (Index y = 0; y < d[1]; ++y)
        for (Index x = 0; x < d[0]; ++x) input[padded.offset(x, y, z)] = volume[d.offset(x, y, z)];
  }

  Tape<Scalar> tape;
  const Var in = tape.constant(std::move(input));
  const ForwardPass pass = forward(tape, model, in, {}, false);
  if (!tape.value(pass.features).all_finite()) throw RuntimeFailure("NaN or Inf in backbone activations");
  const Index k_count = model.classes();
  out.probabilities = Tensor<Scalar>(volume_shape(k_count, d));
  for (Index k = 0; k < k_count; ++k) {
    const auto& p = tape.value(pass.probabilities[static_cast<std::size_t>(k)]);
    if (!p.all_finite()) throw RuntimeFailure("NaN in probability map of class '" + model.embeddings().names[static_cast<std::size_t>(k)] + "'");
    for (Index z = 0; z < d[2]; ++z)
      for (Index y = 0; y < d[1]; ++y)
        for (Index x = 0; x < d[0]; ++x)
          out.probabilities[k * d.voxels() + d.offset(x, y, z)] = p[padded.offset(x, y, z)];
  }
  return out;
}

/// Tile origins along one axis: stride floor(patch * (1 - overlap)),
/// last tile clamped to end at the border.
std::vector<Index> tile_starts(Index extent, Index patch, double overlap);

/// Tiles the volume with overlapping patches, predicts each with
/// predict_all and averages overlapping predictions uniformly. Volumes
/// smaller than the patch are zero-padded symmetrically first.
template <typename Scalar>
Prediction<Scalar> sliding_window_predict(const UniversalModel<Scalar>& model, const Tensor<Scalar>& volume,
                                          const Dims3& patch, double overlap, const PredictOptions& opt = {}) {
  if (volume.rank() != 4 || volume.extent(0) != 1)
    throw ValidationError("sliding_window_predict expects a {1, X, Y, Z} volume");
  if (overlap < 0.0 || overlap >= 1.0) throw ValidationError("overlap fraction must be in [0, 1)");
  const Dims3 d = volume.spatial();
  Dims3 work = d;
  std::array<Index, 3> lead{0, 0, 0};
  for (int a = 0; a < 3; ++a)
    if (d[a] < patch[a]) {
      work[a] = patch[a];
      lead[static_cast<std::size_t>(a)] = (patch[a] - d[a]) / 2;
    }
  Tensor<Scalar> padded(volume_shape(1, work));
  for (Index z = 0; z < d[2]; ++z)
    for (Index y = 0; y < d[1]; ++y)
      for (Index x = 0; x < d[0]; ++x)
        padded[work.offset(x + lead[0], y + lead[1], z + lead[2])] = volume[d.offset(x, y, z)];

  const Index k_count = model.classes();
  Tensor<Scalar> sum(volume_shape(k_count, work));
  std::vector<Index> hits(static_cast<std::size_t>(work.voxels()), 0);
  Prediction<Scalar> out;
  const auto xs = tile_starts(work[0], patch[0], overlap);
  const auto ys = tile_starts(work[1], patch[1], overlap);
  const auto zs = tile_starts(work[2], patch[2], overlap);
  for (Index oz : zs)
    for (Index oy : ys)
      for (Index ox : xs) {
        Tensor<Scalar> tile(volume_shape(1, patch));
        for (Index z = 0; z < patch[2]; ++z)
          for (Index y = 0; y < patch[1]; ++y)
            for (Index x = 0; x < patch[0]; ++x)
              tile[patch.offset(x, y, z)] = padded[work.offset(ox + x, oy + y, oz + z)];
        auto pred = predict_all(model, tile, opt);
        for (auto& w : pred.warnings)
          if (std::find(out.warnings.begin(), out.warnings.end(), w) == out.warnings.end()) out.warnings.push_back(w);
        for (Index z = 0; z < patch[2]; ++z)
          for (Index y = 0; y < patch[1]; ++y)
            for (Index x = 0; x < patch[0]; ++x) {
              const Index dst = work.offset(ox + x, oy + y, oz + z);
              ++hits[static_cast<std::size_t>(dst)];
              for (Index k = 0; k < k_count; ++k)
                sum[k * work.voxels() + dst] += pred.probabilities[k * patch.voxels() + patch.offset(x, y, z)];
            }
      }
  out.probabilities = Tensor<Scalar>(volume_shape(k_count, d));
  for (Index z = 0; z < d[2]; ++z)
    for (Index y = 0; y < d[1]; ++y)
      for (Index x = 0; x < d[0]; ++x) {
        const Index src = work.offset(x + lead[0], y + lead[1], z + lead[2]);
        const Scalar n = Scalar(hits[static_cast<std::size_t>(src)]);
        for (Index k = 0; k < k_count; ++k)
          out.probabilities[k * d.voxels() + d.offset(x, y, z)] = sum[k * work.voxels() + src] / n;
      }
  return out;
}

}  // namespace umseg
