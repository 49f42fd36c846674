// SPDX-License-Identifier: Apache-2.0
#include "umseg/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace umseg {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ValidationError(where + " has unknown key '" + key + "'");
}

const json& require(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ValidationError(where + " is missing '" + key + "'");
  return j.at(key);
}

template <typename T>
T get(const json& j, const std::string& where) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw ValidationError(where + " has the wrong type");
  }
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(what + " is not valid JSON: " + e.what());
  }
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  out << text;
}

int class_ref(const json& j, const ClassRegistry& registry, const std::string& where) {
  if (j.is_number_integer()) {
    const int k = j.get<int>();
    if (k < 1 || k > registry.size()) throw ValidationError(where + ": class index " + std::to_string(k) + " out of range");
    return k;
  }
  if (j.is_string()) {
    try {
      return registry.resolve(j.get<std::string>());
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
  }
  throw ValidationError(where + ": class reference must be a name or an index");
}

json registry_json(const ClassRegistry& registry) {
  json classes = json::array();
  for (const auto& e : registry.entries()) {
    json parents = json::array();
    for (int p : e.parents) parents.push_back(registry.entry(p).name);
    classes.push_back({{"name", e.name}, {"kind", to_string(e.kind)}, {"parents", parents}});
  }
  json bilateral = json::array();
  for (const auto& [l, r] : registry.bilateral_pairs())
    bilateral.push_back({registry.entry(l).name, registry.entry(r).name});
  return {{"classes", classes}, {"bilateral", bilateral}};
}

ClassRegistry registry_of(const json& j) {
  reject_unknown(j, {"classes", "bilateral"}, "registry");
  const json& classes = require(j, "classes", "registry");
  if (!classes.is_array() || classes.empty()) throw ValidationError("registry classes must be a nonempty array");
  std::vector<std::string> names;
  for (const auto& c : classes) {
    reject_unknown(c, {"name", "kind", "parents"}, "registry class");
    names.push_back(get<std::string>(require(c, "name", "registry class"), "registry class name"));
  }
  auto index_of = [&](const json& ref, const std::string& where) {
    if (ref.is_number_integer()) return ref.get<int>();
    const auto name = get<std::string>(ref, where);
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw ValidationError(where + ": unknown class '" + name + "'");
    return static_cast<int>(it - names.begin()) + 1;
  };
  std::vector<ClassEntry> entries;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const json& c = classes[i];
    ClassEntry e;
    e.name = names[i];
    e.index = static_cast<int>(i) + 1;
    e.kind = parse_class_kind(c.contains("kind") ? get<std::string>(c.at("kind"), "registry class kind") : "organ");
    if (c.contains("parents"))
      for (const auto& p : c.at("parents")) e.parents.push_back(index_of(p, "parent of '" + e.name + "'"));
    entries.push_back(std::move(e));
  }
  std::vector<std::pair<int, int>> bilateral;
  if (j.contains("bilateral"))
    for (const auto& pair : j.at("bilateral")) {
      if (!pair.is_array() || pair.size() != 2) throw ValidationError("bilateral entries must be [left, right] pairs");
      bilateral.emplace_back(index_of(pair[0], "bilateral pair"), index_of(pair[1], "bilateral pair"));
    }
  return ClassRegistry(std::move(entries), std::move(bilateral));
}

DatasetEntry dataset_of(const json& j, const ClassRegistry& registry, const std::filesystem::path& base) {
  reject_unknown(j, {"id", "labels", "annotated", "splits", "parent_inclusion", "split_method", "cases"}, "dataset");
  DatasetEntry d;
  DatasetLabelMap& m = d.map;
  m.dataset_id = get<std::string>(require(j, "id", "dataset"), "dataset id");
  const std::string where = "dataset '" + m.dataset_id + "'";
  for (const auto& e : require(j, "labels", where)) {
    reject_unknown(e, {"value", "class"}, where + " label entry");
    m.entries.push_back({get<int>(require(e, "value", where), where + " label value"),
                         class_ref(require(e, "class", where), registry, where)});
  }
  if (j.contains("splits"))
    for (const auto& s : j.at("splits")) {
      reject_unknown(s, {"value", "left", "right", "axis"}, where + " split");
      SplitDirective sd;
      sd.local = get<int>(require(s, "value", where), where + " split value");
      sd.left = class_ref(require(s, "left", where), registry, where);
      sd.right = class_ref(require(s, "right", where), registry, where);
      sd.axis = s.contains("axis") ? get<int>(s.at("axis"), where + " split axis") : 0;
      m.splits.push_back(sd);
    }
  if (j.contains("annotated")) {
    for (const auto& a : j.at("annotated")) m.annotated.insert(class_ref(a, registry, where));
  } else {
    for (const auto& e : m.entries) m.annotated.insert(e.universal);
    for (const auto& s : m.splits) m.annotated.insert({s.left, s.right});
  }
  if (j.contains("parent_inclusion")) m.parent_inclusion = get<bool>(j.at("parent_inclusion"), where + " parent_inclusion");
  if (j.contains("split_method"))
    m.split_method = parse_split_method(get<std::string>(j.at("split_method"), where + " split_method"));
  m.validate(registry);
  for (const auto& c : require(j, "cases", where)) {
    reject_unknown(c, {"id", "image", "labels"}, where + " case");
    CaseEntry ce;
    ce.id = get<std::string>(require(c, "id", where), where + " case id");
    ce.image = base / get<std::string>(require(c, "image", where), where + " case image");
    ce.labels = base / get<std::string>(require(c, "labels", where), where + " case labels");
    d.cases.push_back(std::move(ce));
  }
  return d;
}

std::vector<int> available_indices(const AvailabilityMask& a) {
  std::vector<int> out;
  for (int k = 1; k <= a.size(); ++k)
    if (a.available(k)) out.push_back(k);
  return out;
}

}  // namespace

bool DatasetManifest::excluded(const std::string& dataset, const std::string& case_id) const {
  return std::find(exclude.begin(), exclude.end(), dataset + "/" + case_id) != exclude.end();
}

DatasetManifest parse_manifest(const std::string& json_text, const std::filesystem::path& base_dir) {
  const json j = parse_json(json_text, "manifest");
  reject_unknown(j, {"registry", "orientation", "target_spacing_mm", "crop_floor", "datasets", "exclude"}, "manifest");
  DatasetManifest m;
  if (j.contains("registry")) m.registry = registry_of(j.at("registry"));
  if (j.contains("orientation")) m.orientation = get<std::string>(j.at("orientation"), "manifest orientation");
  if (j.contains("target_spacing_mm")) {
    m.target_spacing_mm = get<double>(j.at("target_spacing_mm"), "manifest target_spacing_mm");
    if (!(m.target_spacing_mm > 0.0)) throw ValidationError("manifest target_spacing_mm must be positive");
  }
  if (j.contains("crop_floor")) {
    if (j.at("crop_floor").is_null())
      m.crop_floor.reset();
    else
      m.crop_floor = get<float>(j.at("crop_floor"), "manifest crop_floor");
  }
  if (j.contains("exclude")) m.exclude = get<std::vector<std::string>>(j.at("exclude"), "manifest exclude");
  std::set<std::string> ids;
  for (const auto& d : require(j, "datasets", "manifest")) {
    m.datasets.push_back(dataset_of(d, m.registry, base_dir));
    if (!ids.insert(m.datasets.back().map.dataset_id).second)
      throw ValidationError("manifest repeats dataset id '" + m.datasets.back().map.dataset_id + "'");
  }
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  try {
    return parse_manifest(slurp(path), path.parent_path());
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

std::string registry_to_json(const ClassRegistry& registry) { return registry_json(registry).dump(2); }

ClassRegistry registry_from_json(const std::string& json_text) {
  return registry_of(parse_json(json_text, "registry"));
}

PreparedCase prepare_case(const Volume& image, const Volume& labels, const DatasetLabelMap& map,
                          const ClassRegistry& registry, const PrepareOptions& opt) {
  if (image.kind != VolumeKind::image) throw ValidationError("image volume is marked as labels");
  if (labels.kind != VolumeKind::labels) throw ValidationError("label volume is marked as an image");
  if (image.dims != labels.dims)
    throw ValidationError("image dims " + to_string(image.dims) + " differ from label dims " + to_string(labels.dims));
  Volume img = clip_normalize(resample_isotropic(reorient(image, opt.orientation), opt.target_spacing_mm));
  Volume lab = resample_isotropic(reorient(labels, opt.orientation), opt.target_spacing_mm);
  HarmonizedLabels h = harmonize(lab.labels(), map, registry);

  PreparedCase out;
  out.spacing = {opt.target_spacing_mm, opt.target_spacing_mm, opt.target_spacing_mm};
  CaseSample s;
  s.image = img.grid();
  s.masks = std::move(h.masks);
  s.availability = std::move(h.availability);
  s.dataset_id = map.dataset_id;
  if (opt.crop_floor) {
    CroppedCase c = crop_foreground(s, *opt.crop_floor);
    out.sample = std::move(c.sample);
    out.crop = c.crop;
  } else {
    out.sample = std::move(s);
    out.crop.original = out.sample.image.dims;
  }
  out.violations = validate_case(out.sample.masks, out.sample.availability, registry);
  return out;
}

void write_case(const std::filesystem::path& dir, const PreparedCase& p) {
  p.sample.check_consistent();
  std::filesystem::create_directories(dir);
  write_volume(Volume::from_grid(p.sample.image, p.spacing), dir / "image.umv");
  for (const auto& [k, m] : p.sample.masks.masks)
    write_volume(Volume::from_mask(m, p.spacing), dir / ("mask_" + std::to_string(k) + ".umv"));
  json violations = json::array();
  for (const auto& v : p.violations) violations.push_back({{"kind", to_string(v.kind)}, {"classes", v.classes}, {"message", v.message}});
  const json meta = {{"dataset", p.sample.dataset_id},
                     {"case", p.sample.case_id},
                     {"classes", p.sample.availability.size()},
                     {"available", available_indices(p.sample.availability)},
                     {"spacing_mm", p.spacing},
                     {"crop_origin", p.crop.origin},
                     {"original_dims", {p.crop.original[0], p.crop.original[1], p.crop.original[2]}},
                     {"violations", violations}};
  spit(dir / "case.json", meta.dump(2));
}

PreparedCase read_case(const std::filesystem::path& dir, int classes) {
  const std::string where = "case " + dir.string();
  const json meta = parse_json(slurp(dir / "case.json"), where + "/case.json");
  reject_unknown(meta, {"dataset", "case", "classes", "available", "spacing_mm", "crop_origin", "original_dims", "violations"},
                 where + "/case.json");
  PreparedCase p;
  p.sample.dataset_id = get<std::string>(require(meta, "dataset", where), where + " dataset");
  p.sample.case_id = get<std::string>(require(meta, "case", where), where + " case");
  const int k = get<int>(require(meta, "classes", where), where + " classes");
  if (k != classes)
    throw ValidationError(where + " was harmonized for " + std::to_string(k) + " classes, expected " + std::to_string(classes));
  const auto spacing = get<std::vector<double>>(require(meta, "spacing_mm", where), where + " spacing_mm");
  if (spacing.size() != 3) throw ValidationError(where + " spacing_mm needs 3 entries");
  p.spacing = {spacing[0], spacing[1], spacing[2]};
  if (meta.contains("crop_origin")) {
    const auto o = get<std::vector<Index>>(meta.at("crop_origin"), where + " crop_origin");
    const auto d = get<std::vector<Index>>(require(meta, "original_dims", where), where + " original_dims");
    if (o.size() != 3 || d.size() != 3) throw ValidationError(where + " crop record needs 3 entries");
    p.crop.origin = {o[0], o[1], o[2]};
    p.crop.original = Dims3(d[0], d[1], d[2]);
  }
  const Volume img = read_volume(dir / "image.umv");
  p.sample.image = img.grid();
  p.sample.masks.dims = img.dims;
  p.sample.availability = AvailabilityMask(classes);
  for (int c : get<std::vector<int>>(require(meta, "available", where), where + " available")) {
    if (c < 1 || c > classes) throw ValidationError(where + " lists class " + std::to_string(c) + " out of range");
    p.sample.availability.set(c);
    const Volume m = read_volume(dir / ("mask_" + std::to_string(c) + ".umv"));
    Mask mask(m.dims);
    for (Index i = 0; i < mask.size(); ++i) mask[i] = m.values[static_cast<std::size_t>(i)] != 0.0f ? 1 : 0;
    p.sample.masks.masks.emplace(c, std::move(mask));
  }
  p.sample.check_consistent();
  return p;
}

void write_index(const std::filesystem::path& root, const CaseIndex& index) {
  const json j = {{"registry", registry_json(index.registry)}, {"cases", index.cases}};
  spit(root / "index.json", j.dump(2));
}

CaseIndex read_index(const std::filesystem::path& root) {
  const std::string where = (root / "index.json").string();
  const json j = parse_json(slurp(root / "index.json"), where);
  reject_unknown(j, {"registry", "cases"}, where);
  CaseIndex idx;
  idx.registry = registry_of(require(j, "registry", where));
  idx.cases = get<std::vector<std::string>>(require(j, "cases", where), where + " cases");
  return idx;
}

std::vector<PreparedCase> read_case_tree(const std::filesystem::path& root, ClassRegistry* registry) {
  const CaseIndex idx = read_index(root);
  std::vector<PreparedCase> out;
  for (const auto& rel : idx.cases) out.push_back(read_case(root / rel, idx.registry.size()));
  if (registry) *registry = idx.registry;
  return out;
}

}  // namespace umseg
