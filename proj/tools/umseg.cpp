// SPDX-License-Identifier: Apache-2.0
//
// umseg command-line tool.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "umseg/gradcheck.hpp"
#include "umseg/manifest.hpp"
#include "umseg/metrics.hpp"
#include "umseg/parallel.hpp"
#include "umseg/synthetic.hpp"
#include "umseg/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace umseg;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool seed_given = false;
  unsigned threads = 1;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Registry from a harmonized tree, a manifest, or a registry JSON file;
/// the built-in taxonomy when `source` is empty.
ClassRegistry registry_from(const std::string& source) {
  if (source.empty()) return build_registry();
  const fs::path p(source);
  if (fs::is_directory(p)) return read_index(p).registry;
  const std::string text = read_text(p);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(source + " is not valid JSON: " + e.what());
  }
  if (j.is_object() && j.contains("datasets")) return load_manifest(p).registry;
  return registry_from_json(text);
}

Dims3 parse_dims(const std::vector<Index>& v, const char* what) {
  if (v.size() == 1) return Dims3(v[0], v[0], v[0]);
  if (v.size() != 3) throw ValidationError(std::string(what) + " takes 1 or 3 extents");
  return Dims3(v[0], v[1], v[2]);
}

void warn(const std::string& message) { std::cerr << json{{"warning", message}}.dump() << '\n'; }

// ------------------------------------------------------------- commands

int cmd_make_demo(const std::string& kind, const fs::path& out, int cases, const Globals& g) {
  fs::path manifest;
  if (kind == "abdominal")
    manifest = write_abdominal_demo(out, g.seed, cases);
  else if (kind == "toy")
    manifest = write_toy_demo(out, g.seed, cases);
  else
    throw ValidationError("unknown demo kind '" + kind + "' (expected abdominal or toy)");
  std::cout << json{{"manifest", manifest.string()}}.dump() << '\n';
  return 0;
}

int cmd_harmonize(const fs::path& manifest_path, const fs::path& out, bool strict, const Globals& g) {
  const DatasetManifest m = load_manifest(manifest_path);
  struct Job {
    const DatasetEntry* dataset;
    const CaseEntry* entry;
    std::string rel;
  };
  std::vector<Job> jobs;
  for (const auto& d : m.datasets)
    for (const auto& c : d.cases)
      if (!m.excluded(d.map.dataset_id, c.id)) jobs.push_back({&d, &c, d.map.dataset_id + "/" + c.id});
  PrepareOptions opt;
  opt.orientation = m.orientation;
  opt.target_spacing_mm = m.target_spacing_mm;
  opt.crop_floor = m.crop_floor;
  std::vector<std::size_t> violations(jobs.size(), 0);
  parallel_for(jobs.size(), g.threads, [&](std::size_t i) {
    const Job& j = jobs[i];
    PreparedCase p = prepare_case(read_volume(j.entry->image), read_volume(j.entry->labels), j.dataset->map, m.registry, opt);
    p.sample.case_id = j.entry->id;
    violations[i] = p.violations.size();
    write_case(out / j.rel, p);
  });
  CaseIndex index;
  index.registry = m.registry;
  std::size_t total = 0;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    index.cases.push_back(jobs[i].rel);
    total += violations[i];
    if (violations[i]) warn(jobs[i].rel + ": " + std::to_string(violations[i]) + " validation findings (see case.json)");
  }
  write_index(out, index);
  std::cout << json{{"cases", jobs.size()}, {"violations", total}, {"out", out.string()}}.dump() << '\n';
  if (strict && total > 0) throw ValidationError(std::to_string(total) + " validation findings in harmonized cases");
  return 0;
}

int cmd_embed_fixed(bool few_hot, const std::string& registry, const fs::path& out) {
  const ClassRegistry reg = registry_from(registry);
  save_embeddings(few_hot ? few_hot_table(reg) : one_hot_table(reg), out);
  std::cout << json{{"classes", reg.size()}, {"dimension", reg.size()}, {"out", out.string()}}.dump() << '\n';
  return 0;
}

int cmd_embed_synth(const std::string& registry, const fs::path& out, int dim, const std::vector<int>& groups,
                    double margin, const Globals& g) {
  const ClassRegistry reg = registry_from(registry);
  SynthSpec spec;
  spec.names = reg.names();
  spec.dimension = dim;
  spec.groups = groups;
  spec.margin = margin;
  const EmbeddingTable t = synth_embeddings(g.seed, spec);
  save_embeddings(t, out);
  std::cout << json{{"classes", t.classes()}, {"dimension", t.dimension()}, {"out", out.string()}}.dump() << '\n';
  return 0;
}

int cmd_embed_similarity(const fs::path& table_path, const fs::path& out) {
  const EmbeddingTable t = load_embeddings(table_path);
  write_text(out, similarity_csv(t.names, cosine_similarity_matrix(t)));
  std::cout << json{{"classes", t.classes()}, {"out", out.string()}}.dump() << '\n';
  return 0;
}

int cmd_train(const fs::path& data, const fs::path& embeddings, const fs::path& config_path, const fs::path& out,
              const std::string& resume, std::int64_t max_steps, const Globals& g) {
  TrainConfig cfg = load_train_config(config_path);
  if (g.seed_given) cfg.seed = g.seed;
  ClassRegistry registry = build_registry();
  std::vector<CaseSample> cases;
  for (auto& p : read_case_tree(data, &registry)) cases.push_back(std::move(p.sample));
  if (cases.empty()) throw ValidationError("no cases under " + data.string());

  std::optional<UniversalModel<float>> model;
  OptimizerState<float> state;
  if (!resume.empty()) {
    Checkpoint ck = load_checkpoint(resume);
    if (!ck.optimizer) throw ValidationError(resume + " holds no optimizer state to resume from");
    if (ck.model.embeddings().names != registry.names())
      throw ValidationError(resume + " was trained on a different class list");
    model.emplace(std::move(ck.model));
    state = std::move(*ck.optimizer);
  } else {
    model.emplace(cfg.model, load_embeddings(embeddings, &registry), cfg.seed);
    state = OptimizerState<float>::for_parameters(model->parameters());
  }
  const std::uint64_t total = static_cast<std::uint64_t>(cfg.total_steps());
  const std::uint64_t until = max_steps >= 0 ? std::min(total, static_cast<std::uint64_t>(max_steps)) : total;

  fs::create_directories(out);
  write_text(out / "config.json", dump_train_config(cfg));
  std::ofstream log(out / "log.jsonl", resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw RuntimeFailure("cannot write " + (out / "log.jsonl").string());
  LogRecord last;
  while (state.step < until) {
    const std::uint64_t stop = cfg.checkpoint_every > 0
                                   ? std::min<std::uint64_t>(until, (state.step / cfg.checkpoint_every + 1) * cfg.checkpoint_every)
                                   : until;
    run_training(*model, state, cases, cfg, stop, [&](const LogRecord& r) {
      last = r;
      if (r.step % static_cast<std::uint64_t>(cfg.log_every) == 0 || r.step + 1 == until) log << to_json_line(r) << '\n';
    });
    log.flush();
    if (cfg.checkpoint_every > 0 && state.step % static_cast<std::uint64_t>(cfg.checkpoint_every) == 0)
      save_checkpoint(out / ("checkpoint_" + std::to_string(state.step) + ".umc"), *model, &state);
  }
  save_checkpoint(out / "final.umc", *model, &state);
  std::cout << json{{"steps", state.step}, {"loss", last.loss}, {"checkpoint", (out / "final.umc").string()}}.dump() << '\n';
  return 0;
}

void write_prediction(const fs::path& dir, const Tensor<float>& probs, const Dims3& d, const Spacing& spacing,
                      double threshold) {
  const Index k_count = probs.extent(0);
  for (Index k = 0; k < k_count; ++k) {
    Grid<float> p(d);
    Mask m(d);
    for (Index i = 0; i < d.voxels(); ++i) {
      p[i] = probs[k * d.voxels() + i];
      m[i] = p[i] >= threshold ? 1 : 0;
    }
    write_volume(Volume::from_grid(p, spacing), dir / ("prob_" + std::to_string(k + 1) + ".umv"));
    write_volume(Volume::from_mask(m, spacing), dir / ("mask_" + std::to_string(k + 1) + ".umv"));
  }
}

int cmd_predict(const fs::path& model_path, const std::string& data, const std::string& image,
                const std::string& orientation, const fs::path& out, const Dims3& patch, double overlap,
                double threshold, const Globals& g) {
  if (data.empty() == image.empty()) throw ValidationError("predict needs exactly one of --data or --image");
  const Checkpoint ck = load_checkpoint(model_path);
  const UniversalModel<float>& model = ck.model;
  if (!image.empty()) {
    Volume v = read_volume(image);
    if (v.kind != VolumeKind::image) throw ValidationError(image + " is a label volume");
    v = clip_normalize(resample_isotropic(reorient(v, orientation)));
    const auto pred = sliding_window_predict(model, image_tensor<float>(v.grid()), patch, overlap);
    for (const auto& w : pred.warnings) warn(image + ": " + w);
    write_prediction(out, pred.probabilities, v.dims, v.spacing, threshold);
    std::cout << json{{"cases", 1}, {"classes", model.classes()}, {"out", out.string()}}.dump() << '\n';
    return 0;
  }
  const CaseIndex index = read_index(data);
  if (index.registry.names() != model.embeddings().names)
    throw ValidationError("model classes do not match the registry of " + data);
  std::vector<std::vector<std::string>> warnings(index.cases.size());
  parallel_for(index.cases.size(), g.threads, [&](std::size_t i) {
    const PreparedCase c = read_case(fs::path(data) / index.cases[i], index.registry.size());
    const auto pred = sliding_window_predict(model, image_tensor<float>(c.sample.image), patch, overlap);
    warnings[i] = pred.warnings;
    write_prediction(out / index.cases[i], pred.probabilities, c.sample.image.dims, c.spacing, threshold);
  });
  for (std::size_t i = 0; i < warnings.size(); ++i)
    for (const auto& w : warnings[i]) warn(index.cases[i] + ": " + w);
  write_index(out, index);
  std::cout << json{{"cases", index.cases.size()}, {"classes", model.classes()}, {"out", out.string()}}.dump() << '\n';
  return 0;
}

int cmd_evaluate(const fs::path& data, const fs::path& predictions, const fs::path& out, const std::string& csv,
                 double tau, const std::vector<std::string>& tau_overrides, double threshold, Index min_voxels,
                 const Globals& g) {
  const CaseIndex index = read_index(data);
  const int k_count = index.registry.size();
  ReportOptions opt;
  opt.default_tolerance_mm = tau;
  opt.mask_threshold = threshold;
  opt.rule.threshold = threshold;
  opt.rule.min_voxels = min_voxels;
  opt.threads = g.threads;
  for (const auto& o : tau_overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ValidationError("--tau-class expects CLASS=MM, got '" + o + "'");
    try {
      opt.tolerance_overrides.emplace_back(index.registry.resolve(o.substr(0, eq)), std::stod(o.substr(eq + 1)));
    } catch (const std::logic_error&) {
      throw ValidationError("bad --tau-class value '" + o + "'");
    }
  }
  std::vector<EvalCase> cases(index.cases.size());
  std::vector<std::vector<Grid<float>>> preds(index.cases.size());
  parallel_for(index.cases.size(), g.threads, [&](std::size_t i) {
    PreparedCase c = read_case(data / index.cases[i], k_count);
    const fs::path dir = predictions / index.cases[i];
    preds[i].assign(static_cast<std::size_t>(k_count), Grid<float>(c.sample.image.dims));
    for (int k = 1; k <= k_count; ++k) {
      if (!c.sample.availability.available(k)) continue;
      fs::path p = dir / ("prob_" + std::to_string(k) + ".umv");
      if (!fs::exists(p)) p = dir / ("mask_" + std::to_string(k) + ".umv");
      if (!fs::exists(p))
        throw ValidationError("no prediction for class " + std::to_string(k) + " of " + index.cases[i] + " in " + dir.string());
      Grid<float> grid = read_volume(p).grid();
      if (grid.dims != c.sample.image.dims)
        throw ValidationError(p.string() + " has dims " + to_string(grid.dims) + ", case has " + to_string(c.sample.image.dims));
      preds[i][static_cast<std::size_t>(k - 1)] = std::move(grid);
    }
    cases[i] = EvalCase{index.cases[i], std::move(c.sample.masks), std::move(c.sample.availability), c.spacing};
  });
  const MetricReport r = report(cases, preds, index.registry, opt);
  write_text(out, report_json(r));
  if (!csv.empty()) write_text(csv, report_csv(r));
  json summary = json::object();
  for (const auto& c : r.classes)
    if (!c.absent()) summary[c.name] = {{"dsc", c.mean_dsc()}, {"nsd", c.mean_nsd()}, {"cases", c.cases.size()}};
  std::cout << json{{"cases", r.case_count}, {"classes", summary}, {"report", out.string()}}.dump() << '\n';
  return 0;
}

int cmd_gradcheck(const Globals& g) {
  double worst = 0.0;
  for (const auto& r : run_gradcheck_suite(g.seed)) {
    worst = std::max(worst, r.max_error);
    std::cout << json{{"check", r.name}, {"max_rel_error", r.max_error}, {"coordinates", r.coordinates},
                      {"pass", r.max_error < kGradcheckTolerance}}
                     .dump()
              << '\n';
  }
  std::cout << json{{"max_rel_error", worst}, {"tolerance", kGradcheckTolerance}, {"pass", worst < kGradcheckTolerance}}.dump()
            << '\n';
  if (!(worst < kGradcheckTolerance))
    throw RuntimeFailure("gradient check failed: max relative error " + std::to_string(worst));
  return 0;
}

int fail(const char* kind, const std::string& message, int code) {
  std::cerr << json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Universal partial-label volumetric segmentation"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option_function<std::uint64_t>(
         "--seed", [&](const std::uint64_t& s) { g.seed = s, g.seed_given = true; }, "Seed for every random draw")
      ->capture_default_str();
  app.add_option("--threads", g.threads, "Worker cap for per-case parallelism")->check(CLI::Range(1u, 1024u));

  std::function<int()> action;

  auto* demo = app.add_subcommand("make-demo", "Write synthetic raw volumes and a manifest");
  std::string demo_kind = "abdominal";
  fs::path demo_out;
  int demo_cases = 2;
  demo->add_option("--kind", demo_kind, "abdominal | toy")->capture_default_str();
  demo->add_option("--out", demo_out, "Output directory")->required();
  demo->add_option("--cases", demo_cases, "Cases per dataset")->capture_default_str()->check(CLI::PositiveNumber);
  demo->callback([&] { action = [&] { return cmd_make_demo(demo_kind, demo_out, demo_cases, g); }; });

  auto* harm = app.add_subcommand("harmonize", "Preprocess manifest cases into universal masks");
  fs::path harm_manifest, harm_out;
  bool harm_strict = false;
  harm->add_option("--manifest", harm_manifest, "Dataset manifest (JSON)")->required()->check(CLI::ExistingFile);
  harm->add_option("--out", harm_out, "Output directory")->required();
  harm->add_flag("--strict", harm_strict, "Fail when any case has validation findings");
  harm->callback([&] { action = [&] { return cmd_harmonize(harm_manifest, harm_out, harm_strict, g); }; });

  auto* embed = app.add_subcommand("embed", "Build and inspect class embedding tables");
  embed->require_subcommand(1);
  std::string emb_registry;
  fs::path emb_out, emb_table;
  int emb_dim = 512;
  std::vector<int> emb_groups;
  double emb_margin = 0.3;
  for (const char* name : {"make-onehot", "make-fewhot"}) {
    auto* sc = embed->add_subcommand(name, std::string(name) == "make-onehot" ? "Identity class codes" : "Class codes with parent bits");
    sc->add_option("--registry", emb_registry, "Registry JSON, manifest or harmonized directory (default: built-in)");
    sc->add_option("--out", emb_out, "UME1 output file")->required();
    const bool few = std::string(name) == "make-fewhot";
    sc->callback([&, few] { action = [&, few] { return cmd_embed_fixed(few, emb_registry, emb_out); }; });
  }
  auto* synth = embed->add_subcommand("make-synth", "Seeded clustered unit vectors");
  synth->add_option("--registry", emb_registry, "Registry JSON, manifest or harmonized directory (default: built-in)");
  synth->add_option("--out", emb_out, "UME1 output file")->required();
  synth->add_option("--dim", emb_dim, "Vector dimension")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--groups", emb_groups, "Sizes of consecutive class groups")->delimiter(',');
  synth->add_option("--margin", emb_margin, "Within- minus cross-group similarity")->capture_default_str();
  synth->callback([&] { action = [&] { return cmd_embed_synth(emb_registry, emb_out, emb_dim, emb_groups, emb_margin, g); }; });
  auto* sim = embed->add_subcommand("similarity", "Cosine similarity matrix as CSV");
  sim->add_option("--table", emb_table, "UME1 table")->required()->check(CLI::ExistingFile);
  sim->add_option("--out", emb_out, "CSV output file")->required();
  sim->callback([&] { action = [&] { return cmd_embed_similarity(emb_table, emb_out); }; });

  auto* train = app.add_subcommand("train", "Masked back-propagation training");
  fs::path tr_data, tr_emb, tr_config, tr_out;
  std::string tr_resume;
  std::int64_t tr_max_steps = -1;
  train->add_option("--data", tr_data, "Harmonized case directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--embeddings", tr_emb, "UME1 class table")->check(CLI::ExistingFile);
  train->add_option("--config", tr_config, "Training config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--out", tr_out, "Run directory")->required();
  train->add_option("--resume", tr_resume, "Checkpoint with optimizer state")->check(CLI::ExistingFile);
  train->add_option("--max-steps", tr_max_steps, "Stop after this many optimizer steps");
  train->callback([&] {
    action = [&] {
      if (tr_resume.empty() && tr_emb.empty()) throw ValidationError("train needs --embeddings unless resuming");
      return cmd_train(tr_data, tr_emb, tr_config, tr_out, tr_resume, tr_max_steps, g);
    };
  });

  auto* pred = app.add_subcommand("predict", "Sliding-window inference");
  fs::path pr_model, pr_out;
  std::string pr_data, pr_image, pr_orientation = "RAS";
  std::vector<Index> pr_patch{96};
  double pr_overlap = 0.5, pr_threshold = 0.5;
  pred->add_option("--model", pr_model, "Checkpoint")->required()->check(CLI::ExistingFile);
  pred->add_option("--data", pr_data, "Harmonized case directory")->check(CLI::ExistingDirectory);
  pred->add_option("--image", pr_image, "Raw UMV1 image (preprocessed before inference)")->check(CLI::ExistingFile);
  pred->add_option("--orientation", pr_orientation, "Canonical orientation for --image")->capture_default_str();
  pred->add_option("--out", pr_out, "Output directory")->required();
  pred->add_option("--patch", pr_patch, "Window extents (1 or 3 values)")->delimiter(',');
  pred->add_option("--overlap", pr_overlap, "Window overlap fraction")->capture_default_str();
  pred->add_option("--threshold", pr_threshold, "Mask threshold")->capture_default_str();
  pred->callback([&] {
    action = [&] {
      return cmd_predict(pr_model, pr_data, pr_image, pr_orientation, pr_out, parse_dims(pr_patch, "--patch"), pr_overlap,
                         pr_threshold, g);
    };
  });

  auto* eval = app.add_subcommand("evaluate", "DSC, NSD and detection report");
  fs::path ev_data, ev_pred, ev_out;
  std::string ev_csv;
  double ev_tau = 1.5, ev_threshold = 0.5;
  Index ev_min = 8;
  std::vector<std::string> ev_tau_class;
  eval->add_option("--data", ev_data, "Harmonized case directory (ground truth)")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--predictions", ev_pred, "Prediction directory (prob_<k>.umv or mask_<k>.umv per case)")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval->add_option("--out", ev_out, "Report JSON")->required();
  eval->add_option("--csv", ev_csv, "Per-case CSV");
  eval->add_option("--tau", ev_tau, "NSD tolerance in mm")->capture_default_str();
  eval->add_option("--tau-class", ev_tau_class, "Per-class tolerance CLASS=MM");
  eval->add_option("--threshold", ev_threshold, "Probability threshold")->capture_default_str();
  eval->add_option("--min-voxels", ev_min, "Minimum detected component size")->capture_default_str();
  eval->callback([&] {
    action = [&] { return cmd_evaluate(ev_data, ev_pred, ev_out, ev_csv, ev_tau, ev_tau_class, ev_threshold, ev_min, g); };
  });

  auto* grad = app.add_subcommand("gradcheck", "f64 finite-difference gradient suite");
  grad->callback([&] { action = [&] { return cmd_gradcheck(g); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 1);
  }
  try {
    return action();
  } catch (const ValidationError& e) {
    return fail("validation", e.what(), 1);
  } catch (const RuntimeFailure& e) {
    return fail("runtime", e.what(), 2);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 2);
  }
}
