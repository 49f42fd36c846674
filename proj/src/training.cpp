// SPDX-License-Identifier: Apache-2.0
#include "umseg/training.hpp"

#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

#include "umseg/binary_io.hpp"

namespace umseg {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ValidationError(where + " has unknown key '" + key + "'");
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(std::string("config key '") + key + "' has the wrong type");
  }
}

std::string sampling_name(BatchSampling s) { return s == BatchSampling::uniform_case ? "uniform-case" : "per-dataset"; }

BatchSampling parse_sampling(const std::string& text) {
  if (text == "uniform-case") return BatchSampling::uniform_case;
  if (text == "per-dataset") return BatchSampling::per_dataset;
  throw ValidationError("unknown sampling '" + text + "' (expected uniform-case or per-dataset)");
}

json model_to_json(const ModelConfig& m) {
  return {{"backbone", to_string(m.backbone.kind)},
          {"base_channels", m.backbone.base_channels},
          {"width", m.backbone.width},
          {"feature_channels", m.backbone.feature_channels},
          {"stages", m.backbone.stages},
          {"head_activation", to_string(m.head_activation)},
          {"controller_init_std", m.controller_init_std}};
}

ModelConfig model_from_json(const json& j) {
  reject_unknown(j, {"backbone", "base_channels", "width", "feature_channels", "stages", "head_activation",
                     "controller_init_std"},
                 "model config");
  ModelConfig m;
  std::string kind = to_string(m.backbone.kind), act = to_string(m.head_activation);
  read_opt(j, "backbone", kind);
  read_opt(j, "head_activation", act);
  m.backbone.kind = parse_backbone_kind(kind);
  m.head_activation = parse_activation(act);
  read_opt(j, "base_channels", m.backbone.base_channels);
  read_opt(j, "width", m.backbone.width);
  read_opt(j, "feature_channels", m.backbone.feature_channels);
  read_opt(j, "stages", m.backbone.stages);
  read_opt(j, "controller_init_std", m.controller_init_std);
  if (m.backbone.base_channels < 1 || m.backbone.width < 1 || m.backbone.feature_channels < 1)
    throw ValidationError("model channel counts must be >= 1");
  return m;
}

}  // namespace

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ValidationError(std::string(name) + " must be positive");
  };
  positive(learning_rate, "learning_rate");
  positive(eps, "eps");
  positive(fg_ratio, "fg_ratio");
  if (weight_decay < 0.0) throw ValidationError("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ValidationError("beta1 and beta2 must lie in [0, 1)");
  if (epochs < 1 || steps_per_epoch < 1 || batch_size < 1)
    throw ValidationError("epochs, steps_per_epoch and batch_size must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs > epochs)
    throw ValidationError("warmup_epochs " + std::to_string(warmup_epochs) + " must lie in [0, epochs=" +
                          std::to_string(epochs) + "]");
  for (int a = 0; a < 3; ++a)
    if (patch[a] < 1) throw ValidationError("patch extents must be >= 1");
  if (dice_weight < 0.0) throw ValidationError("dice_weight must be >= 0");
  if (log_every < 1) throw ValidationError("log_every must be >= 1");
  if (checkpoint_every < 0) throw ValidationError("checkpoint_every must be >= 0");
  for (double p : {augmentation.rotate_probability, augmentation.shift_probability})
    if (p < 0.0 || p > 1.0) throw ValidationError("augmentation probabilities must lie in [0, 1]");
}

TrainConfig parse_train_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("training config is not valid JSON: ") + e.what());
  }
  reject_unknown(j,
                 {"learning_rate", "weight_decay", "beta1", "beta2", "eps", "warmup_epochs", "epochs",
                  "steps_per_epoch", "batch_size", "patch", "fg_ratio", "augment", "augmentation", "sampling",
                  "dice_weight", "seed", "model", "log_every", "checkpoint_every"},
                 "training config");
  TrainConfig c;
  read_opt(j, "learning_rate", c.learning_rate);
  read_opt(j, "weight_decay", c.weight_decay);
  read_opt(j, "beta1", c.beta1);
  read_opt(j, "beta2", c.beta2);
  read_opt(j, "eps", c.eps);
  read_opt(j, "warmup_epochs", c.warmup_epochs);
  read_opt(j, "epochs", c.epochs);
  read_opt(j, "steps_per_epoch", c.steps_per_epoch);
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "fg_ratio", c.fg_ratio);
  read_opt(j, "augment", c.augment);
  read_opt(j, "dice_weight", c.dice_weight);
  read_opt(j, "seed", c.seed);
  read_opt(j, "log_every", c.log_every);
  read_opt(j, "checkpoint_every", c.checkpoint_every);
  if (j.contains("patch")) {
    std::vector<Index> p;
    read_opt(j, "patch", p);
    if (p.size() != 3) throw ValidationError("patch needs 3 extents");
    c.patch = Dims3(p[0], p[1], p[2]);
  }
  if (j.contains("sampling")) {
    std::string s;
    read_opt(j, "sampling", s);
    c.sampling = parse_sampling(s);
  }
  if (j.contains("augmentation")) {
    const json& a = j.at("augmentation");
    reject_unknown(a, {"rotate_probability", "shift_probability", "shift_offset"}, "augmentation config");
    read_opt(a, "rotate_probability", c.augmentation.rotate_probability);
    read_opt(a, "shift_probability", c.augmentation.shift_probability);
    read_opt(a, "shift_offset", c.augmentation.shift_offset);
  }
  if (j.contains("model")) c.model = model_from_json(j.at("model"));
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open training config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_train_config(ss.str());
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

std::string dump_train_config(const TrainConfig& c) {
  json j = {{"learning_rate", c.learning_rate},
            {"weight_decay", c.weight_decay},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"eps", c.eps},
            {"warmup_epochs", c.warmup_epochs},
            {"epochs", c.epochs},
            {"steps_per_epoch", c.steps_per_epoch},
            {"batch_size", c.batch_size},
            {"patch", {c.patch[0], c.patch[1], c.patch[2]}},
            {"fg_ratio", c.fg_ratio},
            {"augment", c.augment},
            {"augmentation",
             {{"rotate_probability", c.augmentation.rotate_probability},
              {"shift_probability", c.augmentation.shift_probability},
              {"shift_offset", c.augmentation.shift_offset}}},
            {"sampling", sampling_name(c.sampling)},
            {"dice_weight", c.dice_weight},
            {"seed", c.seed},
            {"model", model_to_json(c.model)},
            {"log_every", c.log_every},
            {"checkpoint_every", c.checkpoint_every}};
  return j.dump(2);
}

double lr_schedule(std::int64_t step, const TrainConfig& cfg) {
  const std::int64_t warm = cfg.warmup_steps(), total = cfg.total_steps();
  if (step <= 0 && warm > 0) return 0.0;
  if (step < warm) return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(warm);
  if (step >= total) return 0.0;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(total - warm);
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::vector<CaseSample> draw_batch(std::span<const CaseSample> cases, const TrainConfig& cfg, std::uint64_t step) {
  if (cases.empty()) throw ValidationError("no training cases");
  Rng rng(cfg.seed, step);
  std::vector<std::vector<std::size_t>> groups;
  if (cfg.sampling == BatchSampling::per_dataset) {
    std::map<std::string, std::size_t> slot;
    for (std::size_t i = 0; i < cases.size(); ++i) {
      auto [it, fresh] = slot.try_emplace(cases[i].dataset_id, groups.size());
      if (fresh) groups.emplace_back();
      groups[it->second].push_back(i);
    }
  }
  std::vector<CaseSample> batch;
  for (int b = 0; b < cfg.batch_size; ++b) {
    std::size_t pick;
    if (cfg.sampling == BatchSampling::per_dataset) {
      const auto& g = groups[static_cast<std::size_t>(rng.below(static_cast<Index>(groups.size())))];
      pick = g[static_cast<std::size_t>(rng.below(static_cast<Index>(g.size())))];
    } else {
      pick = static_cast<std::size_t>(rng.below(static_cast<Index>(cases.size())));
    }
    PatchSample ps = sample_patch(cases[pick], cfg.patch, cfg.fg_ratio, rng);
    batch.push_back(cfg.augment ? augment(ps.patch, rng, cfg.augmentation) : std::move(ps.patch));
  }
  return batch;
}

std::string to_json_line(const LogRecord& r) {
  return json{{"step", r.step}, {"epoch", r.epoch}, {"lr", r.lr}, {"loss", r.loss}}.dump();
}

void run_training(UniversalModel<float>& model, OptimizerState<float>& state, std::span<const CaseSample> cases,
                  const TrainConfig& cfg, std::uint64_t until, const std::function<void(const LogRecord&)>& on_step) {
  cfg.validate();
  for (const auto& c : cases) c.check_consistent();
  while (state.step < until) {
    const std::uint64_t step = state.step;
    const auto batch = draw_batch(cases, cfg, step);
    const StepResult r = train_step(model, std::span<const CaseSample>(batch), state, cfg);
    if (on_step) {
      LogRecord rec;
      rec.step = step;
      rec.epoch = static_cast<double>(step) / static_cast<double>(cfg.steps_per_epoch);
      rec.lr = r.lr;
      rec.loss = r.loss;
      on_step(rec);
    }
  }
}

// -------------------------------------------------------------- checkpoints

namespace {

void write_blob(ByteWriter& w, const std::string& name, const Shape& shape, const float* data, Index count) {
  w.uint(static_cast<std::uint16_t>(name.size()));
  w.text(name);
  w.uint(static_cast<std::uint8_t>(shape.size()));
  for (Index e : shape) w.uint(static_cast<std::uint64_t>(e));
  for (Index i = 0; i < count; ++i) w.f32(data[i]);
}

struct Blob {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

Blob read_blob(ByteReader& r) {
  Blob b;
  b.name = r.text(r.uint<std::uint16_t>());
  const auto rank = r.uint<std::uint8_t>();
  std::uint64_t count = 1;
  for (int i = 0; i < rank; ++i) {
    const auto e = r.uint<std::uint64_t>();
    if (e == 0 || e > (std::uint64_t{1} << 40)) throw ValidationError("checkpoint blob '" + b.name + "' has a bad extent");
    b.shape.push_back(static_cast<Index>(e));
    count *= e;
  }
  r.need(count * 4);
  b.data.resize(count);
  for (auto& v : b.data) v = r.f32();
  return b;
}

void assign(Tensor<float>& dst, const Blob& b) {
  if (dst.shape() != b.shape)
    throw ValidationError("checkpoint tensor '" + b.name + "' has shape " + shape_string(b.shape) + ", model expects " +
                          shape_string(dst.shape()));
  for (Index i = 0; i < dst.size(); ++i) dst[i] = b.data[static_cast<std::size_t>(i)];
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const UniversalModel<float>& model, const OptimizerState<float>* opt) {
  const EmbeddingTable& emb = model.embeddings();
  json header = {{"model", model_to_json(model.config())},
                 {"feature_channels", model.backbone().feature_channels()},
                 {"global_channels", model.backbone().global_channels()},
                 {"embedding_dim", emb.dimension()},
                 {"classes", emb.names},
                 {"embedding_kind", to_string(emb.kind)},
                 {"template", emb.template_id ? json(to_string(*emb.template_id)) : json(nullptr)},
                 {"optimizer_step", opt ? json(opt->step) : json(nullptr)}};
  const std::string text = header.dump();
  const auto& params = model.parameters();
  ByteWriter w;
  w.text("UMC1");
  w.uint(kCheckpointVersion);
  w.uint(static_cast<std::uint32_t>(text.size()));
  w.text(text);
  std::uint32_t blobs = static_cast<std::uint32_t>(params.values.size()) + 1;
  if (opt) blobs += 2 * static_cast<std::uint32_t>(params.values.size());
  w.uint(blobs);
  for (std::size_t i = 0; i < params.values.size(); ++i)
    write_blob(w, params.names[i], params.values[i].shape(), params.values[i].data(), params.values[i].size());
  // Row-major K x D so the blob reads like the UME1 payload.
  const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows = emb.vectors;
  write_blob(w, "embeddings", {emb.classes(), emb.dimension()}, rows.data(), rows.size());
  if (opt) {
    for (std::size_t i = 0; i < params.values.size(); ++i)
      write_blob(w, "adamw.m." + params.names[i], opt->first_moment[i].shape(), opt->first_moment[i].data(),
                 opt->first_moment[i].size());
    for (std::size_t i = 0; i < params.values.size(); ++i)
      write_blob(w, "adamw.v." + params.names[i], opt->second_moment[i].shape(), opt->second_moment[i].data(),
                 opt->second_moment[i].size());
  }
  return w.take();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "UMC1 checkpoint");
  if (bytes.size() < 4 || r.text(4) != "UMC1") throw ValidationError("bad magic in checkpoint (expected UMC1)");
  const auto version = r.uint<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw ValidationError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  json header;
  try {
    header = json::parse(r.text(r.uint<std::uint32_t>()));
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  reject_unknown(header,
                 {"model", "feature_channels", "global_channels", "embedding_dim", "classes", "embedding_kind",
                  "template", "optimizer_step"},
                 "checkpoint header");

  ModelConfig cfg;
  EmbeddingTable emb;
  std::optional<std::uint64_t> opt_step;
  Index dim = 0;
  try {
    cfg = model_from_json(header.at("model"));
    dim = header.at("embedding_dim").get<Index>();
    emb.names = header.at("classes").get<std::vector<std::string>>();
    emb.kind = parse_encoding_kind(header.at("embedding_kind").get<std::string>());
    if (!header.at("template").is_null()) emb.template_id = parse_template_id(header.at("template").get<std::string>());
    if (!header.at("optimizer_step").is_null()) opt_step = header.at("optimizer_step").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("checkpoint header is malformed: ") + e.what());
  }

  const auto count = r.uint<std::uint32_t>();
  std::map<std::string, Blob> blobs;
  for (std::uint32_t i = 0; i < count; ++i) {
    Blob b = read_blob(r);
    const std::string name = b.name;
    if (!blobs.emplace(name, std::move(b)).second) throw ValidationError("checkpoint repeats tensor '" + name + "'");
  }
  if (r.remaining() != 0) throw ValidationError("checkpoint has " + std::to_string(r.remaining()) + " trailing bytes");

  auto find = [&](const std::string& name) -> const Blob& {
    auto it = blobs.find(name);
    if (it == blobs.end()) throw ValidationError("checkpoint is missing tensor '" + name + "'");
    return it->second;
  };
  const Blob& eb = find("embeddings");
  const Index k = static_cast<Index>(emb.names.size());
  if (eb.shape != Shape{k, dim})
    throw ValidationError("checkpoint embeddings have shape " + shape_string(eb.shape) + ", header says [" +
                          std::to_string(k) + "," + std::to_string(dim) + "]");
  emb.vectors = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(eb.data.data(), k, dim);

  Checkpoint out{UniversalModel<float>(cfg, emb, 0), std::nullopt};
  auto& params = out.model.parameters();
  for (std::size_t i = 0; i < params.values.size(); ++i) assign(params.values[i], find(params.names[i]));
  std::size_t expected = params.values.size() + 1;
  if (opt_step) {
    OptimizerState<float> st = OptimizerState<float>::for_parameters(params);
    st.step = *opt_step;
    for (std::size_t i = 0; i < params.values.size(); ++i) {
      assign(st.first_moment[i], find("adamw.m." + params.names[i]));
      assign(st.second_moment[i], find("adamw.v." + params.names[i]));
    }
    out.optimizer = std::move(st);
    expected += 2 * params.values.size();
  }
  if (blobs.size() != expected)
    throw ValidationError("checkpoint holds " + std::to_string(blobs.size()) + " tensors, model expects " +
                          std::to_string(expected));
  if (out.model.backbone().global_channels() != header.value("global_channels", Index{-1}) ||
      out.model.backbone().feature_channels() != header.value("feature_channels", Index{-1}))
    throw ValidationError("checkpoint channel counts disagree with its model config");
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const UniversalModel<float>& model,
                     const OptimizerState<float>* optimizer) {
  write_file(path, encode_checkpoint(model, optimizer));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

}  // namespace umseg
