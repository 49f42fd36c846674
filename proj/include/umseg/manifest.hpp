// SPDX-License-Identifier: Apache-2.0
//
// Dataset manifests and the on-disk layout of harmonized cases.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "umseg/metrics.hpp"
#include "umseg/pipeline.hpp"
#include "umseg/taxonomy.hpp"

namespace umseg {

struct CaseEntry {
  std::string id;
  std::filesystem::path image;   // absolute after loading
  std::filesystem::path labels;  // absolute after loading
};

struct DatasetEntry {
  DatasetLabelMap map;
  std::vector<CaseEntry> cases;
};

struct DatasetManifest {
  ClassRegistry registry = build_registry();
  std::string orientation = "RAS";
  double target_spacing_mm = kTargetSpacingMm;
  /// Normalized intensity floor for the foreground crop; unset disables it.
  std::optional<float> crop_floor = 0.0f;
  std::vector<DatasetEntry> datasets;
  /// "dataset/case" keys skipped everywhere (duplicates across datasets).
  std::vector<std::string> exclude;

  bool excluded(const std::string& dataset, const std::string& case_id) const;
};

/// Parses a manifest; relative paths resolve against `base_dir`. Unknown
/// keys are rejected at every level.
DatasetManifest parse_manifest(const std::string& json_text, const std::filesystem::path& base_dir);
DatasetManifest load_manifest(const std::filesystem::path& path);

std::string registry_to_json(const ClassRegistry& registry);
ClassRegistry registry_from_json(const std::string& json_text);

/// Preprocessed, harmonized case ready for training or evaluation.
struct PreparedCase {
  CaseSample sample;
  Spacing spacing{kTargetSpacingMm, kTargetSpacingMm, kTargetSpacingMm};
  CropRecord crop;
  std::vector<Violation> violations;
};

struct PrepareOptions {
  std::string orientation = "RAS";
  double target_spacing_mm = kTargetSpacingMm;
  std::optional<float> crop_floor = 0.0f;
};

/// Reorient, resample, clip/normalize, harmonize labels, crop foreground.
PreparedCase prepare_case(const Volume& image, const Volume& labels, const DatasetLabelMap& map,
                          const ClassRegistry& registry, const PrepareOptions& options);

/// Writes image.umv, mask_<k>.umv per available class and case.json.
void write_case(const std::filesystem::path& dir, const PreparedCase& prepared);
PreparedCase read_case(const std::filesystem::path& dir, int classes);

/// index.json at the root of a harmonized output tree.
struct CaseIndex {
  ClassRegistry registry = build_registry();
  std::vector<std::string> cases;  // case directories relative to the root
};

void write_index(const std::filesystem::path& root, const CaseIndex& index);
CaseIndex read_index(const std::filesystem::path& root);

/// All cases listed in root/index.json.
std::vector<PreparedCase> read_case_tree(const std::filesystem::path& root, ClassRegistry* registry = nullptr);

}  // namespace umseg
