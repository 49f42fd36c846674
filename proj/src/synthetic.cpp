// SPDX-License-Identifier: Apache-2.0
#include "umseg/synthetic.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "json.hpp"

#include "umseg/manifest.hpp"
#include "umseg/metrics.hpp"

namespace umseg {

using nlohmann::json;

ClassRegistry toy_registry() {
  return ClassRegistry({{"sphere-organ", kToySphere, ClassKind::organ, {}},
                        {"cube-organ", kToyCube, ClassKind::organ, {}},
                        {"sphere-tumor", kToyTumor, ClassKind::tumor, {kToySphere}}});
}

ToyVolume make_toy_volume(Rng& rng, const Dims3& dims) {
  const Index n = std::min({dims[0], dims[1], dims[2]});
  if (n < 24) throw ValidationError("toy volumes need extents >= 24");
  const double scale = static_cast<double>(n) / 32.0;
  const double rs = rng.uniform(6.0, 8.0) * scale;
  const Index side = static_cast<Index>(std::lround(rng.uniform(8.0, 11.0) * scale));
  const double rt = rng.uniform(2.8, 3.5) * scale;

  std::array<double, 3> sc{};
  std::array<Index, 3> co{};
  for (int attempt = 0;; ++attempt) {
    if (attempt > 1000) throw RuntimeFailure("could not place toy shapes");
    for (int a = 0; a < 3; ++a) {
      sc[static_cast<std::size_t>(a)] = rng.uniform(rs + 1.0, static_cast<double>(dims[a]) - rs - 2.0);
      co[static_cast<std::size_t>(a)] = 1 + rng.below(dims[a] - side - 1);
    }
    // Gap of at least two voxels between the sphere and the cube.
    double d2 = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double lo = static_cast<double>(co[static_cast<std::size_t>(a)]) - 2.0;
      const double hi = static_cast<double>(co[static_cast<std::size_t>(a)] + side - 1) + 2.0;
      const double c = sc[static_cast<std::size_t>(a)];
      const double gap = c < lo ? lo - c : (c > hi ? c - hi : 0.0);
      d2 += gap * gap;
    }
    if (d2 > rs * rs) break;
  }
  std::array<double, 3> tc{};
  {
    const double reach = std::max(0.0, rs - rt - 1.5);
    std::array<double, 3> dir{rng.normal(), rng.normal(), rng.normal()};
    const double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]) + 1e-12;
    const double r = reach * rng.uniform();
    for (std::size_t a = 0; a < 3; ++a) tc[a] = sc[a] + r * dir[a] / norm;
  }

  const double background = rng.uniform(0.1, 0.2);
  const double sphere = rng.uniform(0.53, 0.6);
  const double cube = rng.uniform(0.35, 0.42);
  const double tumor = rng.uniform(0.78, 0.85);
  ToyVolume v{Grid<float>(dims), LabelGrid(dims)};
  for (Index z = 0; z < dims[2]; ++z)
    for (Index y = 0; y < dims[1]; ++y)
      for (Index x = 0; x < dims[0]; ++x) {
        const std::array<double, 3> p{static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
        auto dist2 = [&](const std::array<double, 3>& c) {
          return (p[0] - c[0]) * (p[0] - c[0]) + (p[1] - c[1]) * (p[1] - c[1]) + (p[2] - c[2]) * (p[2] - c[2]);
        };
        double value = background;
        int cls = 0;
        if (x >= co[0] && x < co[0] + side && y >= co[1] && y < co[1] + side && z >= co[2] && z < co[2] + side) {
          value = cube;
          cls = kToyCube;
        }
        if (dist2(sc) <= rs * rs) {
          value = sphere;
          cls = kToySphere;
        }
        if (dist2(tc) <= rt * rt) {
          value = tumor;
          cls = kToyTumor;
        }
        v.image(x, y, z) = static_cast<float>(std::clamp(value + 0.03 * rng.normal(), 0.0, 1.0));
        v.classes(x, y, z) = cls;
      }
  return v;
}

CaseSample toy_case(const ToyVolume& volume, ToyAnnotation annotation, std::string dataset_id, std::string case_id) {
  CaseSample s;
  s.image = volume.image;
  s.dataset_id = std::move(dataset_id);
  s.case_id = std::move(case_id);
  s.masks.dims = volume.image.dims;
  s.availability = AvailabilityMask(3);
  auto add = [&](int cls) {
    Mask m(volume.image.dims);
    for (Index i = 0; i < m.size(); ++i) {
      const int c = volume.classes[i];
      m[i] = (c == cls || (cls == kToySphere && c == kToyTumor)) ? 1 : 0;
    }
    s.masks.masks.emplace(cls, std::move(m));
    s.availability.set(cls);
  };
  if (annotation != ToyAnnotation::cube) {
    add(kToySphere);
    add(kToyTumor);
  }
  if (annotation != ToyAnnotation::sphere_and_tumor) add(kToyCube);
  return s;
}

std::vector<CaseSample> make_toy_dataset(ToyAnnotation annotation, int count, std::uint64_t seed, const Dims3& dims) {
  const std::string id = annotation == ToyAnnotation::sphere_and_tumor ? "A" : annotation == ToyAnnotation::cube ? "B" : "full";
  std::vector<CaseSample> out;
  Rng rng(seed, static_cast<std::uint64_t>(annotation));
  for (int i = 0; i < count; ++i)
    out.push_back(toy_case(make_toy_volume(rng, dims), annotation, id, id + "_" + std::to_string(i)));
  return out;
}

EmbeddingTable toy_embeddings(EncodingKind kind, std::uint64_t seed, int synthetic_dim) {
  const ClassRegistry reg = toy_registry();
  switch (kind) {
    case EncodingKind::one_hot: return one_hot_table(reg);
    case EncodingKind::few_hot: return few_hot_table(reg);
    case EncodingKind::synthetic:
    case EncodingKind::clip: {
      SynthSpec spec;
      spec.names = {"sphere-organ", "sphere-tumor", "cube-organ"};
      spec.groups = {2, 1};
      spec.dimension = synthetic_dim;
      return synth_embeddings(seed, spec).reordered(reg.names());
    }
  }
  throw ValidationError("unknown encoding kind");
}

ToyExperiment ToyExperiment::defaults(BackboneKind backbone) {
  ToyExperiment e;
  TrainConfig& t = e.train;
  t.learning_rate = 3e-3;
  t.weight_decay = 1e-5;
  t.epochs = 30;
  t.steps_per_epoch = 50;
  t.warmup_epochs = 2;
  t.batch_size = 2;
  t.patch = Dims3(16, 16, 16);
  t.fg_ratio = 1.0;
  t.seed = 7;
  t.model.backbone.kind = backbone;
  t.model.backbone.base_channels = 8;
  t.model.backbone.width = 16;
  t.model.backbone.feature_channels = 8;
  t.model.backbone.stages = 2;
  return e;
}

ToyResult run_toy_experiment(const ToyExperiment& e, const std::function<void(const LogRecord&)>& on_step) {
  const auto start = std::chrono::steady_clock::now();
  std::vector<CaseSample> train = make_toy_dataset(ToyAnnotation::sphere_and_tumor, e.cases_per_dataset, e.data_seed, e.dims);
  for (auto& c : make_toy_dataset(ToyAnnotation::cube, e.cases_per_dataset, e.data_seed, e.dims)) train.push_back(std::move(c));
  const auto held = make_toy_dataset(ToyAnnotation::full, e.held_out, e.data_seed + 1000, e.dims);

  UniversalModel<float> model(e.train.model, toy_embeddings(e.encoding, e.data_seed), e.train.seed);
  auto state = OptimizerState<float>::for_parameters(model.parameters());
  ToyResult r;
  run_training(model, state, train, e.train, static_cast<std::uint64_t>(e.train.total_steps()),
               [&](const LogRecord& rec) {
                 r.final_loss = rec.loss;
                 if (on_step) on_step(rec);
               });

  std::array<double, 3> sums{0, 0, 0};
  for (const auto& c : held) {
    const auto pred = sliding_window_predict(model, image_tensor<float>(c.image), e.window, e.overlap);
    const Dims3 d = c.image.dims;
    for (int k = 1; k <= 3; ++k) {
      Mask m(d);
      for (Index i = 0; i < d.voxels(); ++i) m[i] = pred.probabilities[(k - 1) * d.voxels() + i] >= 0.5f ? 1 : 0;
      sums[static_cast<std::size_t>(k - 1)] += dsc(m, c.masks.at(k));
    }
  }
  for (auto& s : sums) s /= static_cast<double>(held.size());
  r.mean_dsc = sums;
  r.feature_channels = model.backbone().feature_channels();
  r.dynamic_parameters = model.parameters()[model.controller_bias()].size();
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  r.model = std::move(model);
  return r;
}

// ------------------------------------------------------------ demo writers

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  out << text;
}

float to_hu(float normalized) { return normalized * (kHuMax - kHuMin) + kHuMin; }

struct Blob {
  int cls;
  std::array<double, 3> center;  // fractions of the volume extent
  std::array<double, 3> radius;
  double hu;
  bool cylinder_z = false;
};

// Phantom in RAS voxel order: x toward patient right, so left-side organs
// sit at low x.
struct Phantom {
  LabelGrid classes;
  Grid<float> hu;
};

Phantom make_phantom(const Dims3& dims, Rng& rng) {
  auto jitter = [&](double c) { return c + rng.uniform(-0.02, 0.02); };
  const std::vector<Blob> blobs = {
      {6, {jitter(0.70), jitter(0.55), jitter(0.60)}, {0.17, 0.20, 0.25}, 60.0},
      {1, {jitter(0.25), jitter(0.45), jitter(0.60)}, {0.08, 0.10, 0.15}, 50.0},
      {7, {jitter(0.35), jitter(0.62), jitter(0.72)}, {0.08, 0.10, 0.10}, 30.0},
      {2, {0.66, 0.30, 0.40}, {0.07, 0.08, 0.15}, 150.0},
      {3, {0.34, 0.30, 0.40}, {0.07, 0.08, 0.15}, 150.0},
      {8, {0.48, 0.35, 0.5}, {0.035, 0.035, 1.0}, 200.0, true},
      {11, {0.48, 0.46, 0.50}, {0.10, 0.035, 0.05}, 45.0},
      {27, {jitter(0.75), jitter(0.60), jitter(0.65)}, {0.05, 0.06, 0.07}, 20.0},
      {26, {0.66, 0.30, 0.44}, {0.035, 0.04, 0.06}, 90.0},
      {32, {0.34, 0.30, 0.36}, {0.03, 0.035, 0.05}, 5.0},
  };
  Phantom p{LabelGrid(dims), Grid<float>(dims, -1000.0f)};
  for (Index z = 0; z < dims[2]; ++z)
    for (Index y = 0; y < dims[1]; ++y)
      for (Index x = 0; x < dims[0]; ++x) {
        const std::array<double, 3> f{(static_cast<double>(x) + 0.5) / static_cast<double>(dims[0]),
                                      (static_cast<double>(y) + 0.5) / static_cast<double>(dims[1]),
                                      (static_cast<double>(z) + 0.5) / static_cast<double>(dims[2])};
        const double bx = (f[0] - 0.5) / 0.46, by = (f[1] - 0.5) / 0.44;
        if (bx * bx + by * by <= 1.0) p.hu(x, y, z) = 40.0f;
        for (const Blob& b : blobs) {
          double s = 0.0;
          for (int a = 0; a < (b.cylinder_z ? 2 : 3); ++a) {
            const double t = (f[static_cast<std::size_t>(a)] - b.center[static_cast<std::size_t>(a)]) / b.radius[static_cast<std::size_t>(a)];
            s += t * t;
          }
          if (s <= 1.0) {
            p.classes(x, y, z) = b.cls;
            p.hu(x, y, z) = static_cast<float>(b.hu);
          }
        }
        p.hu(x, y, z) += static_cast<float>(8.0 * rng.normal());
      }
  return p;
}

template <typename T>
Grid<T> flip_xy(const Grid<T>& g) {
  Grid<T> out(g.dims);
  const Dims3& d = g.dims;
  for (Index z = 0; z < d[2]; ++z)
    for (Index y = 0; y < d[1]; ++y)
      for (Index x = 0; x < d[0]; ++x) out(d[0] - 1 - x, d[1] - 1 - y, z) = g(x, y, z);
  return out;
}

struct DemoDataset {
  std::string id;
  Dims3 dims;
  std::array<double, 3> spacing;
  std::string orientation;
  std::map<int, int> local;  // universal class -> local label (0 drops)
  json labels;
  json splits = json::array();
};

}  // namespace

std::filesystem::path write_abdominal_demo(const std::filesystem::path& dir, std::uint64_t seed, int cases_per_dataset) {
  std::vector<DemoDataset> sets;
  {
    DemoDataset d{"lits", Dims3(48, 40, 20), {1.5, 1.5, 3.0}, "RAS", {{6, 1}, {27, 2}}, {}};
    d.labels = json::array({{{"value", 1}, {"class", "Liver"}}, {{"value", 2}, {"class", "Liver Tumor"}}});
    sets.push_back(d);
  }
  {
    DemoDataset d{"kits", Dims3(72, 60, 40), {1.0, 1.0, 1.5}, "LPS", {{2, 1}, {3, 1}, {26, 2}, {32, 3}}, {}};
    d.labels = json::array({{{"value", 2}, {"class", "Kidney Tumor"}}, {{"value", 3}, {"class", "Kidney Cyst"}}});
    d.splits = json::array({{{"value", 1}, {"left", "Left Kidney"}, {"right", "Right Kidney"}, {"axis", 0}}});
    sets.push_back(d);
  }
  {
    // Tumors and cysts are not annotated here; their voxels read as the organ.
    DemoDataset d{"amos", Dims3(48, 40, 40), {1.5, 1.5, 1.5}, "RAS",
                  {{1, 1}, {2, 2}, {3, 3}, {6, 4}, {7, 5}, {8, 6}, {11, 7}, {27, 4}, {26, 2}, {32, 3}}, {}};
    d.labels = json::array({{{"value", 1}, {"class", "Spleen"}},
                            {{"value", 2}, {"class", "Right Kidney"}},
                            {{"value", 3}, {"class", "Left Kidney"}},
                            {{"value", 4}, {"class", "Liver"}},
                            {{"value", 5}, {"class", "Stomach"}},
                            {{"value", 6}, {"class", "Aorta"}},
                            {{"value", 7}, {"class", "Pancreas"}}});
    sets.push_back(d);
  }

  Rng rng(seed);
  json datasets = json::array();
  for (const auto& s : sets) {
    json cases = json::array();
    for (int i = 0; i < cases_per_dataset; ++i) {
      Phantom p = make_phantom(s.dims, rng);
      LabelGrid local(s.dims);
      for (Index v = 0; v < local.size(); ++v) {
        auto it = s.local.find(p.classes[v]);
        local[v] = it == s.local.end() ? 0 : it->second;
      }
      Grid<float> hu = p.hu;
      if (s.orientation == "LPS") {
        local = flip_xy(local);
        hu = flip_xy(hu);
      }
      const std::string id = "case_" + std::to_string(i);
      const std::filesystem::path rel = std::filesystem::path(s.id) / id;
      write_volume(Volume::from_grid(hu, s.spacing, s.orientation), dir / rel / "image.umv");
      write_volume(Volume::from_labels(local, s.spacing, s.orientation), dir / rel / "labels.umv");
      cases.push_back({{"id", id}, {"image", (rel / "image.umv").string()}, {"labels", (rel / "labels.umv").string()}});
    }
    json ds = {{"id", s.id}, {"labels", s.labels}, {"cases", cases}};
    if (!s.splits.empty()) {
      ds["splits"] = s.splits;
      ds["split_method"] = "component-centroid";
    }
    datasets.push_back(ds);
  }
  const json manifest = {{"orientation", "RAS"}, {"target_spacing_mm", 1.5}, {"crop_floor", 0.0}, {"datasets", datasets}, {"exclude", json::array()}};
  const auto path = dir / "manifest.json";
  write_text(path, manifest.dump(2));
  return path;
}

std::filesystem::path write_toy_demo(const std::filesystem::path& dir, std::uint64_t seed, int cases_per_dataset) {
  json datasets = json::array();
  for (ToyAnnotation a : {ToyAnnotation::sphere_and_tumor, ToyAnnotation::cube}) {
    const auto samples = make_toy_dataset(a, cases_per_dataset, seed);
    // Regenerate the class grids with the same stream to write label volumes.
    Rng rng(seed, static_cast<std::uint64_t>(a));
    json cases = json::array();
    for (const auto& s : samples) {
      const ToyVolume v = make_toy_volume(rng, s.image.dims);
      LabelGrid local(v.classes.dims);
      for (Index i = 0; i < local.size(); ++i) {
        const int c = v.classes[i];
        if (a == ToyAnnotation::cube)
          local[i] = c == kToyCube ? 1 : 0;
        else
          local[i] = c == kToySphere ? 1 : c == kToyTumor ? 2 : 0;
      }
      Grid<float> hu(v.image.dims);
      for (Index i = 0; i < hu.size(); ++i) hu[i] = to_hu(v.image[i]);
      const std::filesystem::path rel = std::filesystem::path(s.dataset_id) / s.case_id;
      write_volume(Volume::from_grid(hu, {1.5, 1.5, 1.5}), dir / rel / "image.umv");
      write_volume(Volume::from_labels(local, {1.5, 1.5, 1.5}), dir / rel / "labels.umv");
      cases.push_back({{"id", s.case_id}, {"image", (rel / "image.umv").string()}, {"labels", (rel / "labels.umv").string()}});
    }
    json labels = a == ToyAnnotation::cube
                      ? json::array({{{"value", 1}, {"class", "cube-organ"}}})
                      : json::array({{{"value", 1}, {"class", "sphere-organ"}}, {{"value", 2}, {"class", "sphere-tumor"}}});
    datasets.push_back({{"id", a == ToyAnnotation::cube ? "B" : "A"}, {"labels", labels}, {"cases", cases}});
  }
  const json manifest = {{"registry", json::parse(registry_to_json(toy_registry()))},
                         {"orientation", "RAS"},
                         {"target_spacing_mm", 1.5},
                         {"crop_floor", nullptr},
                         {"datasets", datasets}};
  const auto path = dir / "manifest.json";
  write_text(path, manifest.dump(2));
  return path;
}

}  // namespace umseg
