// SPDX-License-Identifier: Apache-2.0
//
// Masked back-propagation: per-class BCE summed only over the classes a case
// annotates, AdamW with decoupled weight decay, warm-up cosine schedule.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "umseg/model.hpp"
#include "umseg/pipeline.hpp"

namespace umseg {

enum class BatchSampling { uniform_case, per_dataset };

struct TrainConfig {
  double learning_rate = 4e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int warmup_epochs = 5;
  int epochs = 50;
  int steps_per_epoch = 20;
  int batch_size = 2;
  Dims3 patch{96, 96, 96};
  /// Foreground-centred to background-centred patch ratio.
  double fg_ratio = 1.0;
  bool augment = true;
  AugmentConfig augmentation;
  BatchSampling sampling = BatchSampling::uniform_case;
  /// Weight of an optional soft-Dice term per class; 0 trains on BCE only.
  double dice_weight = 0.0;
  std::uint64_t seed = 0;
  ModelConfig model;
  int log_every = 10;
  int checkpoint_every = 0;

  std::int64_t total_steps() const { return static_cast<std::int64_t>(epochs) * steps_per_epoch; }
  std::int64_t warmup_steps() const { return static_cast<std::int64_t>(warmup_epochs) * steps_per_epoch; }
  /// Throws ValidationError on non-positive rates, warmup > epochs, etc.
  void validate() const;
};

/// Parses the JSON training config; unknown keys are rejected.
TrainConfig parse_train_config(const std::string& json_text);
TrainConfig load_train_config(const std::filesystem::path& path);
std::string dump_train_config(const TrainConfig& config);

/// Linear ramp 0 -> lr over the warmup steps, then
/// lr (1 + cos(pi * progress)) / 2 reaching 0 at total_steps().
double lr_schedule(std::int64_t step, const TrainConfig& config);

template <typename Scalar>
struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<Tensor<Scalar>> first_moment;
  std::vector<Tensor<Scalar>> second_moment;

  static OptimizerState for_parameters(const ParameterSet<Scalar>& params) {
    OptimizerState s;
    for (const auto& v : params.values) {
      s.first_moment.emplace_back(v.shape());
      s.second_moment.emplace_back(v.shape());
    }
    return s;
  }
};

/// One AdamW update at learning rate `lr`; decay is applied to the weights
/// directly, not through the gradient.
template <typename Scalar>
void adamw_update(ParameterSet<Scalar>& params, const std::vector<Tensor<Scalar>>& grads, OptimizerState<Scalar>& state,
                  const TrainConfig& cfg, double lr) {
  if (grads.size() != params.values.size() || state.first_moment.size() != params.values.size())
    throw ValidationError("optimizer state does not match the parameter set");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const Scalar bias1 = Scalar(1.0 - std::pow(cfg.beta1, t));
  const Scalar bias2 = Scalar(1.0 - std::pow(cfg.beta2, t));
  const Scalar b1 = Scalar(cfg.beta1), b2 = Scalar(cfg.beta2), eps = Scalar(cfg.eps);
  const Scalar step = Scalar(lr), decay = Scalar(1.0 - lr * cfg.weight_decay);
  for (std::size_t i = 0; i < params.values.size(); ++i) {
    auto p = params.values[i].values().array();
    const auto g = grads[i].values().array();
    auto m = state.first_moment[i].values().array();
    auto v = state.second_moment[i].values().array();
    p *= decay;
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g * g;
    p -= step * (m / bias1) / ((v / bias2).sqrt() + eps);
  }
}

template <typename Scalar>
Tensor<Scalar> image_tensor(const Grid<float>& image) {
  Tensor<Scalar> t(volume_shape(1, image.dims));
  for (Index i = 0; i < image.size(); ++i) t[i] = Scalar(image[i]);
  return t;
}

template <typename Scalar>
Tensor<Scalar> mask_tensor(const Mask& mask) {
  Tensor<Scalar> t(volume_shape(1, mask.dims));
  for (Index i = 0; i < mask.size(); ++i) t[i] = mask[i] ? Scalar(1) : Scalar(0);
  return t;
}

/// Mean over available classes of the per-class BCE (each a mean over
/// voxels). Unavailable classes never enter the tape, so they contribute
/// nothing to the loss or any gradient. `predictions[k]` is the map for
/// class index k + 1.
template <typename Scalar>
Var masked_bce_loss(Tape<Scalar>& tape, std::span<const Var> predictions, const BinaryMaskSet& masks,
                    const AvailabilityMask& availability, double dice_weight = 0.0) {
  if (static_cast<int>(predictions.size()) != availability.size())
    throw ValidationError("masked_bce_loss: " + std::to_string(predictions.size()) + " predictions for " +
                          std::to_string(availability.size()) + " availability flags");
  std::vector<Var> terms;
  std::vector<Scalar> weights;
  for (int k = 1; k <= availability.size(); ++k) {
    if (!availability.available(k)) continue;
    const Var p = predictions[static_cast<std::size_t>(k - 1)];
    if (!p.valid()) throw ValidationError("masked_bce_loss: no prediction for available class " + std::to_string(k));
    const Tensor<Scalar> target = mask_tensor<Scalar>(masks.at(k));
    if (target.shape() != tape.value(p).shape())
      throw ValidationError("masked_bce_loss: mask " + std::to_string(k) + " has dims " + to_string(masks.at(k).dims) +
                            ", prediction " + shape_string(tape.value(p).shape()));
    terms.push_back(bce(tape, p, target));
    weights.push_back(Scalar(1));
    if (dice_weight > 0.0) {
      terms.push_back(soft_dice_loss(tape, p, target));
      weights.push_back(Scalar(dice_weight));
    }
  }
  if (terms.empty()) throw ValidationError("masked_bce_loss: case has no available class");
  const Scalar classes = Scalar(availability.count());
  for (auto& w : weights) w /= classes;
  return weighted_sum<Scalar>(tape, terms, weights);
}

template <typename Scalar>
struct GradientResult {
  Scalar loss = 0;
  std::vector<Tensor<Scalar>> grads;  // one per parameter, in parameter order
};

/// Loss averaged over the batch and its gradient for every parameter.
/// Predictions are formed for all K classes; the masked loss decides which
/// of them receive supervision.
template <typename Scalar>
GradientResult<Scalar> compute_gradients(const UniversalModel<Scalar>& model, std::span<const CaseSample> batch,
                                         double dice_weight = 0.0) {
  if (batch.empty()) throw ValidationError("empty batch");
  Tape<Scalar> tape;
  const auto bound = bind_parameters(tape, model.parameters(), true);
  std::vector<Var> losses;
  for (const CaseSample& sample : batch) {
    if (sample.availability.size() != model.classes())
      throw ValidationError("case '" + sample.case_id + "' has " + std::to_string(sample.availability.size()) +
                            " availability flags, model has " + std::to_string(model.classes()) + " classes");
    const Var input = tape.constant(image_tensor<Scalar>(sample.image));
    const ForwardPass pass = forward(tape, model, input, {}, true, bound);
    losses.push_back(masked_bce_loss(tape, std::span<const Var>(pass.probabilities), sample.masks,
                                     sample.availability, dice_weight));
  }
  const Var total = mean<Scalar>(tape, losses);
  GradientResult<Scalar> out;
  out.loss = tape.value(total)[0];
  if (!std::isfinite(static_cast<double>(out.loss))) {
    std::string detail;
    for (std::size_t i = 0; i < losses.size(); ++i)
      detail += " " + batch[i].case_id + "=" + std::to_string(static_cast<double>(tape.value(losses[i])[0]));
    throw RuntimeFailure("non-finite loss; per-case losses:" + detail);
  }
  tape.backward(total);
  for (const Var v : bound) out.grads.push_back(tape.grad(v));
  return out;
}

struct StepResult {
  double loss = 0.0;
  double lr = 0.0;
  std::uint64_t step = 0;  // optimizer step index this update used
};

/// Forward, masked loss, backward and one AdamW update at
/// lr_schedule(state.step).
template <typename Scalar>
StepResult train_step(UniversalModel<Scalar>& model, std::span<const CaseSample> batch, OptimizerState<Scalar>& state,
                      const TrainConfig& cfg) {
  StepResult r;
  r.step = state.step;
  r.lr = lr_schedule(static_cast<std::int64_t>(state.step), cfg);
  GradientResult<Scalar> g;
  try {
    g = compute_gradients(model, batch, cfg.dice_weight);
  } catch (const RuntimeFailure& e) {
    throw RuntimeFailure("step " + std::to_string(state.step) + " (lr " + std::to_string(r.lr) + "): " + e.what());
  }
  r.loss = static_cast<double>(g.loss);
  adamw_update(model.parameters(), g.grads, state, cfg, r.lr);
  return r;
}

/// Patches for optimizer step `step`, drawn from a generator seeded by
/// (config.seed, step) so any step can be reproduced in isolation.
std::vector<CaseSample> draw_batch(std::span<const CaseSample> cases, const TrainConfig& config, std::uint64_t step);

struct LogRecord {
  std::uint64_t step = 0;
  double epoch = 0.0;
  double lr = 0.0;
  double loss = 0.0;
};

std::string to_json_line(const LogRecord& record);

/// Runs optimizer steps from state.step up to (excluding) `until`.
/// `on_step` sees every step.
void run_training(UniversalModel<float>& model, OptimizerState<float>& state, std::span<const CaseSample> cases,
                  const TrainConfig& config, std::uint64_t until,
                  const std::function<void(const LogRecord&)>& on_step = {});

// -------------------------------------------------------------- checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  UniversalModel<float> model;
  std::optional<OptimizerState<float>> optimizer;
};

std::vector<std::uint8_t> encode_checkpoint(const UniversalModel<float>& model, const OptimizerState<float>* optimizer);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const UniversalModel<float>& model,
                     const OptimizerState<float>* optimizer = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace umseg
