// SPDX-License-Identifier: Apache-2.0
#include "umseg/taxonomy.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>

namespace umseg {

std::string to_string(ClassKind kind) {
  switch (kind) {
    case ClassKind::organ: return "organ";
    case ClassKind::tumor: return "tumor";
    case ClassKind::cyst: return "cyst";
  }
  return "?";
}

ClassKind parse_class_kind(const std::string& text) {
  if (text == "organ") return ClassKind::organ;
  if (text == "tumor") return ClassKind::tumor;
  if (text == "cyst") return ClassKind::cyst;
  throw ValidationError("unknown class kind '" + text + "'");
}

std::string to_string(SplitMethod method) {
  return method == SplitMethod::midplane ? "midplane" : "component-centroid";
}

SplitMethod parse_split_method(const std::string& text) {
  if (text == "midplane") return SplitMethod::midplane;
  if (text == "component-centroid") return SplitMethod::component_centroid;
  throw ValidationError("unknown split method '" + text + "'");
}

std::string to_string(Violation::Kind kind) {
  switch (kind) {
    case Violation::Kind::tumor_outside_parent: return "tumor_outside_parent";
    case Violation::Kind::bilateral_overlap: return "bilateral_overlap";
    case Violation::Kind::availability_mismatch: return "availability_mismatch";
    case Violation::Kind::dims_mismatch: return "dims_mismatch";
  }
  return "?";
}

// ---------------------------------------------------------------- registry

ClassRegistry::ClassRegistry(std::vector<ClassEntry> entries, std::vector<std::pair<int, int>> bilateral)
    : entries_(std::move(entries)), bilateral_(std::move(bilateral)) {
  std::set<std::string> names;
  const int k = size();
  for (int i = 0; i < k; ++i) {
    const ClassEntry& e = entries_[static_cast<std::size_t>(i)];
    if (e.index != i + 1)
      throw ValidationError("class '" + e.name + "' has index " + std::to_string(e.index) + ", expected " +
                            std::to_string(i + 1));
    if (e.name.empty()) throw ValidationError("class " + std::to_string(e.index) + " has an empty name");
    if (!names.insert(e.name).second) throw ValidationError("duplicate class name '" + e.name + "'");
  }
  for (const ClassEntry& e : entries_) {
    if (e.kind != ClassKind::organ && e.parents.empty())
      throw ValidationError(to_string(e.kind) + " class '" + e.name + "' has no parent organ");
    for (int p : e.parents) {
      if (p < 1 || p > k || p == e.index)
        throw ValidationError("class '" + e.name + "' has invalid parent " + std::to_string(p));
      if (entries_[static_cast<std::size_t>(p - 1)].kind != ClassKind::organ)
        throw ValidationError("class '" + e.name + "' has non-organ parent " + std::to_string(p));
    }
  }
  for (const auto& [l, r] : bilateral_)
    if (l < 1 || r < 1 || l > k || r > k || l == r)
      throw ValidationError("invalid bilateral pair (" + std::to_string(l) + ", " + std::to_string(r) + ")");
}

const ClassEntry& ClassRegistry::entry(int index) const {
  if (index < 1 || index > size()) throw ValidationError("class index " + std::to_string(index) + " out of range");
  return entries_[static_cast<std::size_t>(index - 1)];
}

std::optional<int> ClassRegistry::find(const std::string& name) const {
  for (const ClassEntry& e : entries_)
    if (e.name == name) return e.index;
  return std::nullopt;
}

int ClassRegistry::resolve(const std::string& name_or_index) const {
  if (auto idx = find(name_or_index)) return *idx;
  if (!name_or_index.empty() && std::all_of(name_or_index.begin(), name_or_index.end(), ::isdigit)) {
    const int idx = std::stoi(name_or_index);
    entry(idx);
    return idx;
  }
  throw ValidationError("unknown class '" + name_or_index + "'");
}

std::vector<std::string> ClassRegistry::names() const {
  std::vector<std::string> out;
  for (const ClassEntry& e : entries_) out.push_back(e.name);
  return out;
}

ClassRegistry ClassRegistry::subset(const std::vector<std::string>& names) const {
  std::map<int, int> remap;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto idx = find(names[i]);
    if (!idx) throw ValidationError("unknown class '" + names[i] + "'");
    remap[*idx] = static_cast<int>(i) + 1;
  }
  std::vector<ClassEntry> out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    ClassEntry e = entry(*find(names[i]));
    e.index = static_cast<int>(i) + 1;
    std::vector<int> parents;
    for (int p : e.parents)
      if (remap.count(p)) parents.push_back(remap[p]);
    // Tumors whose parents were all dropped become plain classes.
    if (parents.empty()) e.kind = ClassKind::organ;
    e.parents = parents;
    out.push_back(std::move(e));
  }
  std::vector<std::pair<int, int>> bilateral;
  for (const auto& [l, r] : bilateral_)
    if (remap.count(l) && remap.count(r)) bilateral.emplace_back(remap[l], remap[r]);
  return ClassRegistry(std::move(out), std::move(bilateral));
}

bool operator==(const ClassRegistry& a, const ClassRegistry& b) {
  if (a.size() != b.size() || a.bilateral_ != b.bilateral_) return false;
  for (int i = 0; i < a.size(); ++i) {
    const auto& x = a.entries_[static_cast<std::size_t>(i)];
    const auto& y = b.entries_[static_cast<std::size_t>(i)];
    if (x.name != y.name || x.kind != y.kind || x.parents != y.parents) return false;
  }
  return true;
}

ClassRegistry build_registry() {
  using K = ClassKind;
  const std::vector<std::pair<std::string, K>> list = {
      {"Spleen", K::organ},
      {"Right Kidney", K::organ},
      {"Left Kidney", K::organ},
      {"Gall Bladder", K::organ},
      {"Esophagus", K::organ},
      {"Liver", K::organ},
      {"Stomach", K::organ},
      {"Aorta", K::organ},
      {"Postcava", K::organ},
      {"Portal Vein and Splenic Vein", K::organ},
      {"Pancreas", K::organ},
      {"Right Adrenal Gland", K::organ},
      {"Left Adrenal Gland", K::organ},
      {"Duodenum", K::organ},
      {"Hepatic Vessel", K::organ},
      {"Right Lung", K::organ},
      {"Left Lung", K::organ},
      {"Colon", K::organ},
      {"Intestine", K::organ},
      {"Rectum", K::organ},
      {"Bladder", K::organ},
      {"Prostate/Uterus", K::organ},
      {"Head of Femur Left", K::organ},
      {"Head of Femur Right", K::organ},
      {"Celiac Truck", K::organ},
      {"Kidney Tumor", K::tumor},
      {"Liver Tumor", K::tumor},
      {"Pancreas Tumor", K::tumor},
      {"Hepatic Vessel Tumor", K::tumor},
      {"Lung Tumor", K::tumor},
      {"Colon Tumor", K::tumor},
      {"Kidney Cyst", K::cyst},
  };
  const std::map<int, std::vector<int>> parents = {
      {26, {2, 3}}, {27, {6}}, {28, {11}}, {29, {15}}, {30, {16, 17}}, {31, {18}}, {32, {2, 3}},
  };
  std::vector<ClassEntry> entries;
  for (std::size_t i = 0; i < list.size(); ++i) {
    const int idx = static_cast<int>(i) + 1;
    auto it = parents.find(idx);
    entries.push_back({list[i].first, idx, list[i].second, it == parents.end() ? std::vector<int>{} : it->second});
  }
  return ClassRegistry(std::move(entries), {{3, 2}, {13, 12}, {17, 16}, {23, 24}});
}

// ------------------------------------------------------------- label maps

void DatasetLabelMap::validate(const ClassRegistry& registry) const {
  const std::string where = "dataset '" + dataset_id + "': ";
  std::set<int> locals;
  auto claim_local = [&](int local) {
    if (local == 0) throw ValidationError(where + "local label 0 is reserved for background");
    if (!locals.insert(local).second)
      throw ValidationError(where + "local label " + std::to_string(local) + " mapped twice");
  };
  auto check_target = [&](int cls) {
    registry.entry(cls);
    if (!annotated.count(cls))
      throw ValidationError(where + "class " + std::to_string(cls) + " is a mapping target but not annotated");
  };
  for (const auto& m : entries) {
    claim_local(m.local);
    check_target(m.universal);
  }
  for (const auto& s : splits) {
    claim_local(s.local);
    check_target(s.left);
    check_target(s.right);
    if (s.left == s.right)
      throw ValidationError(where + "split of local label " + std::to_string(s.local) + " targets one class twice");
    if (s.axis < 0 || s.axis > 2) throw ValidationError(where + "split axis must be 0, 1 or 2");
  }
  for (int cls : annotated) registry.entry(cls);
}

const Mask& BinaryMaskSet::at(int index) const {
  auto it = masks.find(index);
  if (it == masks.end()) throw ValidationError("no mask for class " + std::to_string(index));
  return it->second;
}

int AvailabilityMask::count() const {
  return static_cast<int>(std::count(flags.begin(), flags.end(), true));
}

// ---------------------------------------------------------------- splitting

namespace {

bool voxel_is_left(Index coord, Index extent) { return 2 * coord + 1 <= extent; }

void assign_voxelwise(const std::vector<Index>& voxels, const Dims3& dims, int axis, Mask& left, Mask& right) {
  for (Index o : voxels) {
    const Index c = dims.coords(o)[axis];
    (voxel_is_left(c, dims[axis]) ? left : right)[o] = 1;
  }
}

}  // namespace

std::pair<Mask, Mask> split_left_right(const Mask& mask, int axis, SplitMethod method) {
  if (axis < 0 || axis > 2) throw ValidationError("split axis " + std::to_string(axis) + " is not 0, 1 or 2");
  if (count(mask) == 0) throw ValidationError("cannot split an empty mask");
  const Dims3& d = mask.dims;
  Mask left(d), right(d);

  if (method == SplitMethod::midplane) {
    std::vector<Index> all;
    for (Index i = 0; i < mask.size(); ++i)
      if (mask[i]) all.push_back(i);
    assign_voxelwise(all, d, axis, left, right);
    return {std::move(left), std::move(right)};
  }

  const auto components = connected_components(mask, Connectivity::full26);
  const double mid = static_cast<double>(d[axis] - 1) / 2.0;
  for (const auto& comp : components) {
    bool has_left = false, has_right = false;
    for (Index o : comp) (voxel_is_left(d.coords(o)[axis], d[axis]) ? has_left : has_right) = true;
    const double c = centroid(d, comp)[axis];
    const bool straddles_alone = components.size() == 1 && has_left && has_right;
    if (straddles_alone || c == mid) {
      assign_voxelwise(comp, d, axis, left, right);
      continue;
    }
    Mask& side = c < mid ? left : right;
    for (Index o : comp) side[o] = 1;
  }
  return {std::move(left), std::move(right)};
}

// -------------------------------------------------------------- harmonize

namespace {

double squared_distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  double s = 0;
  for (int i = 0; i < 3; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

/// Unions tumor voxels into the annotated parent(s). With two candidate
/// parents each component goes to the parent containing its centroid, or
/// failing that the parent whose own centroid is nearest.
void apply_parent_inclusion(BinaryMaskSet& set, const ClassRegistry& registry) {
  for (const ClassEntry& e : registry.entries()) {
    if (e.kind == ClassKind::organ || !set.has(e.index)) continue;
    std::vector<int> parents;
    for (int p : e.parents)
      if (set.has(p)) parents.push_back(p);
    if (parents.empty()) continue;
    const Mask& tumor = set.masks.at(e.index);
    if (parents.size() == 1) {
      Mask& parent = set.masks.at(parents[0]);
      for (Index i = 0; i < tumor.size(); ++i)
        if (tumor[i]) parent[i] = 1;
      continue;
    }
    std::vector<std::array<double, 3>> parent_centres;
    std::vector<bool> parent_nonempty;
    for (int p : parents) {
      const Mask& pm = set.masks.at(p);
      std::vector<Index> voxels;
      for (Index i = 0; i < pm.size(); ++i)
        if (pm[i]) voxels.push_back(i);
      parent_centres.push_back(centroid(set.dims, voxels));
      parent_nonempty.push_back(!voxels.empty());
    }
    for (const auto& comp : connected_components(tumor, Connectivity::full26)) {
      const auto c = centroid(set.dims, comp);
      const Index cx = std::lround(c[0]), cy = std::lround(c[1]), cz = std::lround(c[2]);
      std::size_t chosen = parents.size();
      for (std::size_t j = 0; j < parents.size() && chosen == parents.size(); ++j)
        if (set.masks.at(parents[j])(cx, cy, cz)) chosen = j;
      if (chosen == parents.size()) {
        double best = std::numeric_limits<double>::infinity();
        chosen = 0;
        for (std::size_t j = 0; j < parents.size(); ++j) {
          if (!parent_nonempty[j]) continue;
          const double d2 = squared_distance(c, parent_centres[j]);
          if (d2 < best) {
            best = d2;
            chosen = j;
          }
        }
      }
      Mask& parent = set.masks.at(parents[chosen]);
      for (Index o : comp) parent[o] = 1;
    }
  }
}

}  // namespace

HarmonizedLabels harmonize(const LabelGrid& labels, const DatasetLabelMap& map, const ClassRegistry& registry) {
  if (!labels.consistent())
    throw ValidationError("label volume dims " + to_string(labels.dims) + " do not match its " +
                          std::to_string(labels.size()) + " voxels");
  map.validate(registry);

  HarmonizedLabels out;
  out.masks.dims = labels.dims;
  out.availability = AvailabilityMask(registry.size());
  for (int cls : map.annotated) {
    out.masks.masks.emplace(cls, Mask(labels.dims));
    out.availability.set(cls);
  }

  std::map<int, int> direct;
  for (const auto& m : map.entries) direct[m.local] = m.universal;
  std::map<int, Mask> pending_splits;
  for (const auto& s : map.splits) pending_splits.emplace(s.local, Mask(labels.dims));

  for (Index i = 0; i < labels.size(); ++i) {
    const int v = labels[i];
    if (v == 0) continue;
    if (auto it = direct.find(v); it != direct.end()) {
      out.masks.masks.at(it->second)[i] = 1;
    } else if (auto sp = pending_splits.find(v); sp != pending_splits.end()) {
      sp->second[i] = 1;
    } else {
      throw ValidationError("dataset '" + map.dataset_id + "': unknown local label value " + std::to_string(v));
    }
  }

  for (const auto& s : map.splits) {
    const Mask& whole = pending_splits.at(s.local);
    if (count(whole) == 0) continue;
    auto [left, right] = split_left_right(whole, s.axis, map.split_method);
    Mask& l = out.masks.masks.at(s.left);
    Mask& r = out.masks.masks.at(s.right);
    for (Index i = 0; i < whole.size(); ++i) {
      if (left[i]) l[i] = 1;
      if (right[i]) r[i] = 1;
    }
  }

  if (map.parent_inclusion) apply_parent_inclusion(out.masks, registry);
  return out;
}

// ---------------------------------------------------------------- validate

std::vector<Violation> validate_case(const BinaryMaskSet& masks, const AvailabilityMask& availability,
                                     const ClassRegistry& registry) {
  using Kind = Violation::Kind;
  std::vector<Violation> found;
  if (availability.size() != registry.size())
    found.push_back({Kind::availability_mismatch, {},
                     "availability has " + std::to_string(availability.size()) + " flags for " +
                         std::to_string(registry.size()) + " classes"});

  for (const auto& [cls, mask] : masks.masks) {
    if (cls < 1 || cls > registry.size()) {
      found.push_back({Kind::availability_mismatch, {cls}, "mask for unknown class " + std::to_string(cls)});
      continue;
    }
    if (mask.dims != masks.dims || !mask.consistent())
      found.push_back({Kind::dims_mismatch, {cls},
                       "mask of '" + registry.entry(cls).name + "' has dims " + to_string(mask.dims) +
                           ", case has " + to_string(masks.dims)});
  }
  if (!found.empty() && found.back().kind == Kind::dims_mismatch) return found;

  for (int k = 1; k <= std::min(registry.size(), availability.size()); ++k) {
    const bool flag = availability.available(k);
    if (flag != masks.has(k))
      found.push_back({Kind::availability_mismatch, {k},
                       "class '" + registry.entry(k).name + "' " +
                           (flag ? "flagged available but has no mask" : "has a mask but is flagged unavailable")});
  }

  for (const ClassEntry& e : registry.entries()) {
    if (e.kind == ClassKind::organ || !masks.has(e.index)) continue;
    std::vector<int> parents;
    for (int p : e.parents)
      if (masks.has(p)) parents.push_back(p);
    if (parents.empty()) continue;
    const Mask& tumor = masks.at(e.index);
    Index outside = 0;
    for (Index i = 0; i < tumor.size(); ++i) {
      if (!tumor[i]) continue;
      const bool inside = std::any_of(parents.begin(), parents.end(), [&](int p) { return masks.at(p)[i] != 0; });
      if (!inside) ++outside;
    }
    if (outside > 0) {
      std::string parent_names;
      for (int p : parents) parent_names += (parent_names.empty() ? "'" : " / '") + registry.entry(p).name + "'";
      std::vector<int> classes{e.index};
      classes.insert(classes.end(), parents.begin(), parents.end());
      found.push_back({Kind::tumor_outside_parent, classes,
                       "'" + e.name + "' has " + std::to_string(outside) + " voxel(s) outside " + parent_names});
    }
  }

  for (const auto& [l, r] : registry.bilateral_pairs()) {
    if (!masks.has(l) || !masks.has(r)) continue;
    const Index n = overlap(masks.at(l), masks.at(r));
    if (n > 0)
      found.push_back({Kind::bilateral_overlap, {l, r},
                       "'" + registry.entry(l).name + "' and '" + registry.entry(r).name + "' share " +
                           std::to_string(n) + " voxel(s)"});
  }
  return found;
}

}  // namespace umseg
