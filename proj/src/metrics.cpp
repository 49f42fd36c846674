// SPDX-License-Identifier: Apache-2.0
#include "umseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "json.hpp"

#include "umseg/parallel.hpp"

namespace umseg {

namespace {

void require_same_dims(const Mask& a, const Mask& b, const char* what) {
  if (a.dims != b.dims)
    throw ValidationError(std::string(what) + ": dims " + to_string(a.dims) + " and " + to_string(b.dims) + " differ");
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// Lower envelope of parabolas w (q - v)^2 + f(v) along one line.
void edt_line(const double* f, double* out, Index n, double w, std::vector<Index>& v, std::vector<double>& z) {
  v.resize(static_cast<std::size_t>(n));
  z.resize(static_cast<std::size_t>(n) + 1);
  Index k = -1;
  for (Index q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double s;
    for (;;) {
      const Index p = v[static_cast<std::size_t>(k)];
      s = ((f[q] + w * static_cast<double>(q * q)) - (f[p] + w * static_cast<double>(p * p))) /
          (2.0 * w * static_cast<double>(q - p));
      if (s > z[static_cast<std::size_t>(k)]) break;
      --k;  // z[0] is -inf, so k stays >= 0
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = s;
    z[static_cast<std::size_t>(k) + 1] = kInf;
  }
  if (k < 0) {
    for (Index q = 0; q < n; ++q) out[q] = kInf;
    return;
  }
  Index j = 0;
  for (Index q = 0; q < n; ++q) {
    while (z[static_cast<std::size_t>(j) + 1] < static_cast<double>(q)) ++j;
    const Index p = v[static_cast<std::size_t>(j)];
    const double d = static_cast<double>(q - p);
    out[q] = f[p] + w * d * d;
  }
}

}  // namespace

double dsc(const Mask& prediction, const Mask& truth) {
  require_same_dims(prediction, truth, "dsc");
  const Index a = count(prediction), b = count(truth);
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(overlap(prediction, truth)) / static_cast<double>(a + b);
}

Mask surface(const Mask& mask) {
  const Dims3& d = mask.dims;
  Mask out(d);
  static constexpr int kSteps[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  for (Index z = 0; z < d[2]; ++z)
    for (Index y = 0; y < d[1]; ++y)
      for (Index x = 0; x < d[0]; ++x) {
        if (!mask(x, y, z)) continue;
        for (const auto& s : kSteps) {
          const Index nx = x + s[0], ny = y + s[1], nz = z + s[2];
          if (!d.contains(nx, ny, nz) || !mask(nx, ny, nz)) {
            out(x, y, z) = 1;
            break;
          }
        }
      }
  return out;
}

std::vector<double> squared_distance_transform(const Mask& sites, const Spacing& spacing) {
  const Dims3& d = sites.dims;
  std::vector<double> g(static_cast<std::size_t>(d.voxels()));
  for (Index i = 0; i < sites.size(); ++i) g[static_cast<std::size_t>(i)] = sites[i] ? 0.0 : kInf;
  std::vector<Index> v;
  std::vector<double> z, line, res;
  const std::array<Index, 3> stride{1, d[0], d[0] * d[1]};
  for (int axis = 0; axis < 3; ++axis) {
    const Index n = d[axis];
    const double w = spacing[static_cast<std::size_t>(axis)] * spacing[static_cast<std::size_t>(axis)];
    line.resize(static_cast<std::size_t>(n));
    res.resize(static_cast<std::size_t>(n));
    const int a = (axis + 1) % 3, b = (axis + 2) % 3;
    for (Index j = 0; j < d[b]; ++j)
      for (Index i = 0; i < d[a]; ++i) {
        const Index base = i * stride[static_cast<std::size_t>(a)] + j * stride[static_cast<std::size_t>(b)];
        const Index step = stride[static_cast<std::size_t>(axis)];
        for (Index q = 0; q < n; ++q) line[static_cast<std::size_t>(q)] = g[static_cast<std::size_t>(base + q * step)];
        edt_line(line.data(), res.data(), n, w, v, z);
        for (Index q = 0; q < n; ++q) g[static_cast<std::size_t>(base + q * step)] = res[static_cast<std::size_t>(q)];
      }
  }
  return g;
}

double nsd(const Mask& prediction, const Mask& truth, double tolerance_mm, const Spacing& spacing) {
  require_same_dims(prediction, truth, "nsd");
  if (!(tolerance_mm >= 0.0)) throw ValidationError("nsd tolerance must be >= 0");
  for (double s : spacing)
    if (!(s > 0.0)) throw ValidationError("nsd spacing must be positive");
  const Index a = count(prediction), b = count(truth);
  if (a == 0 && b == 0) return 1.0;
  if (a == 0 || b == 0) return 0.0;
  const Mask sp = surface(prediction), st = surface(truth);
  const auto to_truth = squared_distance_transform(st, spacing);
  const auto to_pred = squared_distance_transform(sp, spacing);
  Index within = 0, total = 0;
  for (Index i = 0; i < sp.size(); ++i) {
    if (sp[i]) {
      ++total;
      if (std::sqrt(to_truth[static_cast<std::size_t>(i)]) <= tolerance_mm) ++within;
    }
    if (st[i]) {
      ++total;
      if (std::sqrt(to_pred[static_cast<std::size_t>(i)]) <= tolerance_mm) ++within;
    }
  }
  return static_cast<double>(within) / static_cast<double>(total);
}

Mask binarize(const Grid<float>& probability, double threshold) {
  Mask m(probability.dims);
  for (Index i = 0; i < probability.size(); ++i) m[i] = probability[i] >= threshold ? 1 : 0;
  return m;
}

bool detect(const Grid<float>& probability, const DetectionRule& rule) {
  for (const auto& c : connected_components(binarize(probability, rule.threshold), Connectivity::full26))
    if (static_cast<Index>(c.size()) >= rule.min_voxels) return true;
  return false;
}

double harmonic_mean(double sensitivity, double specificity) {
  if (sensitivity + specificity == 0.0) return 0.0;
  return 2.0 * sensitivity * specificity / (sensitivity + specificity);
}

DetectionStats detection_stats(const std::vector<bool>& decisions, const std::vector<bool>& truth) {
  if (decisions.size() != truth.size())
    throw ValidationError("detection_stats: " + std::to_string(decisions.size()) + " decisions for " +
                          std::to_string(truth.size()) + " cases");
  DetectionStats s;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i])
      ++(decisions[i] ? s.true_positive : s.false_negative);
    else
      ++(decisions[i] ? s.false_positive : s.true_negative);
  }
  if (s.true_positive + s.false_negative == 0 || s.true_negative + s.false_positive == 0)
    throw ValidationError("detection_stats needs at least one positive and one negative case");
  s.sensitivity = 100.0 * static_cast<double>(s.true_positive) / static_cast<double>(s.true_positive + s.false_negative);
  s.specificity = 100.0 * static_cast<double>(s.true_negative) / static_cast<double>(s.true_negative + s.false_positive);
  s.harmonic = harmonic_mean(s.sensitivity, s.specificity);
  return s;
}

double ClassMetrics::mean_dsc() const {
  double s = 0.0;
  for (const auto& c : cases) s += c.dsc;
  return cases.empty() ? 0.0 : s / static_cast<double>(cases.size());
}

double ClassMetrics::mean_nsd() const {
  double s = 0.0;
  for (const auto& c : cases) s += c.nsd;
  return cases.empty() ? 0.0 : s / static_cast<double>(cases.size());
}

MetricReport report(const std::vector<EvalCase>& cases, const std::vector<std::vector<Grid<float>>>& predictions,
                    const ClassRegistry& registry, const ReportOptions& opt) {
  if (cases.size() != predictions.size())
    throw ValidationError("report: " + std::to_string(predictions.size()) + " predictions for " +
                          std::to_string(cases.size()) + " cases");
  const int k_count = registry.size();
  auto tolerance = [&](int k) {
    for (const auto& [idx, tau] : opt.tolerance_overrides)
      if (idx == k) return tau;
    return opt.default_tolerance_mm;
  };
  for (std::size_t i = 0; i < cases.size(); ++i) {
    if (cases[i].availability.size() != k_count || static_cast<int>(predictions[i].size()) != k_count)
      throw ValidationError("case '" + cases[i].case_id + "' does not cover the " + std::to_string(k_count) +
                            " registry classes");
    for (int k = 1; k <= k_count; ++k) {
      if (!cases[i].availability.available(k)) continue;
      if (predictions[i][static_cast<std::size_t>(k - 1)].dims != cases[i].truth.at(k).dims)
        throw ValidationError("case '" + cases[i].case_id + "': prediction dims differ from truth for class " +
                              registry.entry(k).name);
    }
  }

  struct PerCase {
    std::vector<std::optional<CaseMetric>> metrics;
    std::vector<std::optional<std::pair<bool, bool>>> detection;  // (decision, truth)
  };
  std::vector<PerCase> per(cases.size());
  auto work = [&](std::size_t i) {
    const EvalCase& c = cases[i];
    PerCase& out = per[i];
    out.metrics.resize(static_cast<std::size_t>(k_count));
    out.detection.resize(static_cast<std::size_t>(k_count));
    for (int k = 1; k <= k_count; ++k) {
      if (!c.availability.available(k)) continue;
      const auto& prob = predictions[i][static_cast<std::size_t>(k - 1)];
      const Mask& truth = c.truth.at(k);
      const Mask pred = binarize(prob, opt.mask_threshold);
      out.metrics[static_cast<std::size_t>(k - 1)] = CaseMetric{c.case_id, dsc(pred, truth), nsd(pred, truth, tolerance(k), c.spacing)};
      if (registry.entry(k).kind != ClassKind::organ)
        out.detection[static_cast<std::size_t>(k - 1)] = std::make_pair(detect(prob, opt.rule), count(truth) > 0);
    }
  };
  parallel_for(cases.size(), opt.threads, work);

  MetricReport r;
  r.rule = opt.rule;
  r.mask_threshold = opt.mask_threshold;
  r.case_count = static_cast<Index>(cases.size());
  for (int k = 1; k <= k_count; ++k) {
    ClassMetrics cm;
    cm.index = k;
    cm.name = registry.entry(k).name;
    cm.tolerance_mm = tolerance(k);
    std::vector<bool> decisions, truths;
    for (const auto& p : per) {
      if (p.metrics[static_cast<std::size_t>(k - 1)]) cm.cases.push_back(*p.metrics[static_cast<std::size_t>(k - 1)]);
      if (p.detection[static_cast<std::size_t>(k - 1)]) {
        decisions.push_back(p.detection[static_cast<std::size_t>(k - 1)]->first);
        truths.push_back(p.detection[static_cast<std::size_t>(k - 1)]->second);
      }
    }
    r.classes.push_back(std::move(cm));
    if (registry.entry(k).kind != ClassKind::organ) {
      DetectionResult d;
      d.index = k;
      d.name = registry.entry(k).name;
      d.positives = std::count(truths.begin(), truths.end(), true);
      d.negatives = static_cast<Index>(truths.size()) - d.positives;
      if (d.positives > 0 && d.negatives > 0) d.stats = detection_stats(decisions, truths);
      r.detection.push_back(std::move(d));
    }
  }
  return r;
}

std::string report_json(const MetricReport& r) {
  using nlohmann::json;
  json classes = json::array();
  for (const auto& c : r.classes) {
    json j = {{"index", c.index}, {"name", c.name}, {"nsd_tolerance_mm", c.tolerance_mm}, {"cases", c.cases.size()}};
    if (c.absent()) {
      j["status"] = "absent";
    } else {
      j["status"] = "evaluated";
      j["dsc_mean"] = c.mean_dsc();
      j["nsd_mean"] = c.mean_nsd();
      json per = json::array();
      for (const auto& m : c.cases) per.push_back({{"case", m.case_id}, {"dsc", m.dsc}, {"nsd", m.nsd}});
      j["per_case"] = per;
    }
    classes.push_back(j);
  }
  json det = json::array();
  for (const auto& d : r.detection) {
    json j = {{"index", d.index}, {"name", d.name}, {"positives", d.positives}, {"negatives", d.negatives}};
    if (d.stats) {
      j["sensitivity"] = d.stats->sensitivity;
      j["specificity"] = d.stats->specificity;
      j["harmonic_mean"] = d.stats->harmonic;
    } else {
      j["status"] = "insufficient cases";
    }
    det.push_back(j);
  }
  json root = {{"cases", r.case_count},
               {"mask_threshold", r.mask_threshold},
               {"detection_rule", {{"threshold", r.rule.threshold}, {"min_voxels", r.rule.min_voxels}, {"connectivity", 26}}},
               {"classes", classes},
               {"detection", det}};
  return root.dump(2);
}

std::string report_csv(const MetricReport& r) {
  std::ostringstream out;
  out << std::setprecision(17) << "case,class_index,class_name,dsc,nsd\n";
  for (const auto& c : r.classes)
    for (const auto& m : c.cases) out << m.case_id << ',' << c.index << ',' << c.name << ',' << m.dsc << ',' << m.nsd << '\n';
  return out.str();
}

std::string similarity_csv(const std::vector<std::string>& names, const Eigen::MatrixXd& sim) {
  if (sim.rows() != static_cast<Index>(names.size()) || sim.cols() != sim.rows())
    throw ValidationError("similarity matrix does not match the class list");
  std::ostringstream out;
  out << std::setprecision(9) << "class";
  for (const auto& n : names) out << ',' << n;
  out << '\n';
  for (Index i = 0; i < sim.rows(); ++i) {
    out << names[static_cast<std::size_t>(i)];
    for (Index j = 0; j < sim.cols(); ++j) out << ',' << sim(i, j);
    out << '\n';
  }
  return out.str();
}

}  // namespace umseg
