// SPDX-License-Identifier: Apache-2.0
//
// Synthetic data: the sphere/cube partial-label task and a small abdominal
// phantom written as raw volumes plus a dataset manifest.
#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>

#include "umseg/training.hpp"

namespace umseg {

inline constexpr int kToySphere = 1;
inline constexpr int kToyCube = 2;
inline constexpr int kToyTumor = 3;

/// sphere-organ, cube-organ, sphere-tumor (inside sphere-organ).
ClassRegistry toy_registry();

/// Which classes a toy case annotates.
enum class ToyAnnotation { sphere_and_tumor, cube, full };

struct ToyVolume {
  Grid<float> image;  // normalized intensities
  LabelGrid classes;  // universal class per voxel, tumor over sphere, 0 background
};

/// One sphere with an embedded tumor and one cube on a noisy background,
/// each with its own intensity band.
ToyVolume make_toy_volume(Rng& rng, const Dims3& dims = Dims3(32, 32, 32));

CaseSample toy_case(const ToyVolume& volume, ToyAnnotation annotation, std::string dataset_id, std::string case_id);

std::vector<CaseSample> make_toy_dataset(ToyAnnotation annotation, int count, std::uint64_t seed,
                                         const Dims3& dims = Dims3(32, 32, 32));

/// Class table for the toy registry; synthetic tables put sphere-organ and
/// sphere-tumor in one similarity group.
EmbeddingTable toy_embeddings(EncodingKind kind, std::uint64_t seed = 0, int synthetic_dim = 32);

struct ToyExperiment {
  TrainConfig train;
  EncodingKind encoding = EncodingKind::synthetic;
  int cases_per_dataset = 24;
  int held_out = 8;
  Dims3 dims{32, 32, 32};
  Dims3 window{16, 16, 16};
  double overlap = 0.5;
  std::uint64_t data_seed = 1;

  /// Scaled-down recipe: 16^3 patches, tiny backbone, warm-up cosine AdamW.
  static ToyExperiment defaults(BackboneKind backbone = BackboneKind::encoder_decoder);
};

struct ToyResult {
  std::array<double, 3> mean_dsc{0, 0, 0};  // per class index 1..3
  double final_loss = 0.0;
  double seconds = 0.0;
  Index dynamic_parameters = 0;
  Index feature_channels = 0;
  std::optional<UniversalModel<float>> model;
};

/// Trains jointly on dataset A (sphere + tumor annotated) and dataset B
/// (cube annotated), then scores every class on fully annotated held-out
/// volumes with sliding-window inference.
ToyResult run_toy_experiment(const ToyExperiment& experiment,
                             const std::function<void(const LogRecord&)>& on_step = {});

/// Raw LiTS-, KiTS- and AMOS-like phantom volumes (HU, mixed spacing and
/// orientation) plus manifest.json under `dir`.
std::filesystem::path write_abdominal_demo(const std::filesystem::path& dir, std::uint64_t seed, int cases_per_dataset = 2);

/// The toy task as raw volumes plus manifest.json with its own registry.
std::filesystem::path write_toy_demo(const std::filesystem::path& dir, std::uint64_t seed, int cases_per_dataset = 24);

}  // namespace umseg
