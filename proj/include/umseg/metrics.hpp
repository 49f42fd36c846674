// SPDX-License-Identifier: Apache-2.0
//
// Dice, normalized surface distance and patient-level tumor detection.
#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "umseg/grid.hpp"
#include "umseg/taxonomy.hpp"

namespace umseg {

using Spacing = std::array<double, 3>;

/// 2|A n B| / (|A| + |B|); 1 when both are empty.
double dsc(const Mask& prediction, const Mask& truth);

/// Mask voxels with at least one 6-neighbour outside the mask (the volume
/// border counts as outside).
Mask surface(const Mask& mask);

/// Squared Euclidean distance in mm from every voxel to the nearest set
/// voxel of `sites`; +inf everywhere when `sites` is empty.
std::vector<double> squared_distance_transform(const Mask& sites, const Spacing& spacing);

/// Fraction of both surfaces lying within `tolerance_mm` of the other
/// surface. 1 when both masks are empty, 0 when exactly one is.
double nsd(const Mask& prediction, const Mask& truth, double tolerance_mm, const Spacing& spacing);

struct DetectionRule {
  double threshold = 0.5;
  Index min_voxels = 8;
};

/// True iff the thresholded map (p >= threshold) holds a 26-connected
/// component of at least min_voxels voxels.
bool detect(const Grid<float>& probability, const DetectionRule& rule = {});

Mask binarize(const Grid<float>& probability, double threshold = 0.5);

/// 2 s p / (s + p); 0 when both are 0.
double harmonic_mean(double sensitivity, double specificity);

struct DetectionStats {
  Index true_positive = 0, false_negative = 0, true_negative = 0, false_positive = 0;
  double sensitivity = 0.0;  // percent
  double specificity = 0.0;  // percent
  double harmonic = 0.0;     // percent
};

/// Requires at least one positive and one negative case.
DetectionStats detection_stats(const std::vector<bool>& decisions, const std::vector<bool>& truth);

struct CaseMetric {
  std::string case_id;
  double dsc = 0.0;
  double nsd = 0.0;
};

struct ClassMetrics {
  int index = 0;
  std::string name;
  double tolerance_mm = 1.5;
  std::vector<CaseMetric> cases;  // only cases annotating this class
  bool absent() const { return cases.empty(); }
  double mean_dsc() const;
  double mean_nsd() const;
};

struct DetectionResult {
  int index = 0;
  std::string name;
  std::optional<DetectionStats> stats;  // empty without both a positive and a negative case
  Index positives = 0, negatives = 0;
};

struct MetricReport {
  std::vector<ClassMetrics> classes;
  std::vector<DetectionResult> detection;
  DetectionRule rule;
  double mask_threshold = 0.5;
  Index case_count = 0;
};

/// Ground truth for one evaluated case.
struct EvalCase {
  std::string case_id;
  BinaryMaskSet truth;
  AvailabilityMask availability;
  Spacing spacing{1.5, 1.5, 1.5};
};

struct ReportOptions {
  double default_tolerance_mm = 1.5;
  std::vector<std::pair<int, double>> tolerance_overrides;  // (class index, tau mm)
  double mask_threshold = 0.5;
  DetectionRule rule;
  unsigned threads = 1;
};

/// `predictions[i][k - 1]` is the probability map of class k for case i.
/// Only classes available in a case are scored for that case; detection
/// covers tumor and cyst classes.
MetricReport report(const std::vector<EvalCase>& cases, const std::vector<std::vector<Grid<float>>>& predictions,
                    const ClassRegistry& registry, const ReportOptions& options = {});

std::string report_json(const MetricReport& report);
/// One row per (case, class): case,class_index,class_name,dsc,nsd.
std::string report_csv(const MetricReport& report);

/// K x K matrix with a header row and a leading name column.
std::string similarity_csv(const std::vector<std::string>& names, const Eigen::MatrixXd& similarity);

}  // namespace umseg
