// SPDX-License-Identifier: Apache-2.0
//
// Universal class registry and conversion of dataset-local label volumes
// into per-class binary masks with availability flags.
#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "umseg/grid.hpp"

namespace umseg {

enum class ClassKind { organ, tumor, cyst };

std::string to_string(ClassKind kind);
ClassKind parse_class_kind(const std::string& text);

struct ClassEntry {
  std::string name;
  int index = 0;  // 1-based
  ClassKind kind = ClassKind::organ;
  /// Containing organ(s). Bilateral organs give two candidates, e.g. a
  /// kidney tumor may sit in either kidney.
  std::vector<int> parents;
};

/// Ordered class list with indices 1..K. Immutable once built.
class ClassRegistry {
 public:
  /// Validates and adopts `entries`; indices must be 1..K in order.
  /// `bilateral` lists (left, right) index pairs that must never overlap.
  explicit ClassRegistry(std::vector<ClassEntry> entries, std::vector<std::pair<int, int>> bilateral = {});

  int size() const { return static_cast<int>(entries_.size()); }
  const ClassEntry& entry(int index) const;
  const std::vector<ClassEntry>& entries() const { return entries_; }
  const std::vector<std::pair<int, int>>& bilateral_pairs() const { return bilateral_; }
  std::optional<int> find(const std::string& name) const;
  /// Name or decimal index to a class index; throws when unknown.
  int resolve(const std::string& name_or_index) const;
  std::vector<std::string> names() const;

  /// Registry restricted to `names` (in that order), reindexed 1..n, with
  /// parent links and bilateral pairs outside the subset dropped.
  ClassRegistry subset(const std::vector<std::string>& names) const;

  friend bool operator==(const ClassRegistry& a, const ClassRegistry& b);

 private:
  std::vector<ClassEntry> entries_;
  std::vector<std::pair<int, int>> bilateral_;
};

/// The 32-class universal abdominal CT taxonomy.
ClassRegistry build_registry();

enum class SplitMethod { midplane, component_centroid };

std::string to_string(SplitMethod method);
SplitMethod parse_split_method(const std::string& text);

struct LabelMapping {
  int local = 0;
  int universal = 0;
};

/// Splits one local label into a left and a right universal class.
struct SplitDirective {
  int local = 0;
  int left = 0;
  int right = 0;
  int axis = 0;
};

struct DatasetLabelMap {
  std::string dataset_id;
  std::vector<LabelMapping> entries;
  std::set<int> annotated;
  std::vector<SplitDirective> splits;
  bool parent_inclusion = true;
  SplitMethod split_method = SplitMethod::component_centroid;

  /// Checks the structural invariants against a registry; throws
  /// ValidationError on the first problem.
  void validate(const ClassRegistry& registry) const;
};

/// Per-class masks for the classes a case annotates, keyed by class index.
struct BinaryMaskSet {
  Dims3 dims;
  std::map<int, Mask> masks;

  bool has(int index) const { return masks.count(index) != 0; }
  const Mask& at(int index) const;
};

struct AvailabilityMask {
  std::vector<bool> flags;  // flags[k - 1] for class k

  AvailabilityMask() = default;
  explicit AvailabilityMask(int classes) : flags(static_cast<std::size_t>(classes), false) {}

  int size() const { return static_cast<int>(flags.size()); }
  bool available(int index) const { return flags.at(static_cast<std::size_t>(index - 1)); }
  void set(int index, bool value = true) { flags.at(static_cast<std::size_t>(index - 1)) = value; }
  int count() const;
  friend bool operator==(const AvailabilityMask&, const AvailabilityMask&) = default;
};

struct HarmonizedLabels {
  BinaryMaskSet masks;
  AvailabilityMask availability;
};

/// Converts a dataset-local label volume into universal binary masks.
/// Every annotated class gets a (possibly empty) mask; split directives
/// separate bilateral organs; with parent inclusion on, tumor voxels are
/// unioned into their annotated parent organ.
HarmonizedLabels harmonize(const LabelGrid& labels, const DatasetLabelMap& map, const ClassRegistry& registry);

/// Partitions a mask into (left, right) halves along `axis`; "left" is the
/// lower-coordinate side. With component_centroid each 26-connected
/// component goes whole to the side holding its centroid; a lone component
/// that straddles the mid-plane, or one centred exactly on it, is split
/// voxel-wise.
std::pair<Mask, Mask> split_left_right(const Mask& mask, int axis, SplitMethod method);

struct Violation {
  enum class Kind { tumor_outside_parent, bilateral_overlap, availability_mismatch, dims_mismatch };
  Kind kind;
  std::vector<int> classes;
  std::string message;
};

std::string to_string(Violation::Kind kind);

/// Consistency findings for a harmonized case; empty means valid.
std::vector<Violation> validate_case(const BinaryMaskSet& masks, const AvailabilityMask& availability,
                                     const ClassRegistry& registry);

}  // namespace umseg
