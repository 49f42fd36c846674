// SPDX-License-Identifier: Apache-2.0
//
// Class encodings consumed by the controller: precomputed text embeddings
// (UME1 files), one-hot and few-hot codes, and seeded synthetic tables.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "umseg/taxonomy.hpp"

namespace umseg {

enum class TemplateId { V1, V2, V3 };

std::string to_string(TemplateId id);
TemplateId parse_template_id(const std::string& text);

inline constexpr const char* kClassPlaceholder = "[CLS]";

struct PromptTemplate {
  TemplateId id;
  std::string pattern;

  /// Throws unless `pattern` holds exactly one placeholder.
  PromptTemplate(TemplateId id, std::string pattern);

  /// V1 "A photo of a [CLS].", V2 "There is [CLS] in this computerized
  /// tomography.", V3 "A computerized tomography of a [CLS].".
  static PromptTemplate standard(TemplateId id);
};

std::string render_prompt(const PromptTemplate& tmpl, const std::string& class_name);

enum class EncodingKind { clip, one_hot, few_hot, synthetic };

std::string to_string(EncodingKind kind);
EncodingKind parse_encoding_kind(const std::string& text);

/// K named class vectors of dimension D, rows in registry order. Vectors are
/// kept exactly as produced (no normalization).
struct EmbeddingTable {
  EncodingKind kind = EncodingKind::clip;
  std::vector<std::string> names;
  Eigen::MatrixXf vectors;  // K x D
  std::optional<TemplateId> template_id;

  int classes() const { return static_cast<int>(vectors.rows()); }
  int dimension() const { return static_cast<int>(vectors.cols()); }

  /// Same names and bitwise-identical vectors.
  bool same_content(const EmbeddingTable& other) const;
  /// Rows reordered so that names follow `order`.
  EmbeddingTable reordered(const std::vector<std::string>& order) const;
};

enum class EmbeddingLoadFailure { bad_magic, truncated, registry_mismatch, malformed, io };

class EmbeddingLoadError : public ValidationError {
 public:
  EmbeddingLoadError(EmbeddingLoadFailure reason, const std::string& what)
      : ValidationError(what), reason_(reason) {}
  EmbeddingLoadFailure reason() const { return reason_; }

 private:
  EmbeddingLoadFailure reason_;
};

/// Reads a UME1 file. When `registry` is given, the stored names must match
/// its class names in order.
EmbeddingTable load_embeddings(const std::filesystem::path& path, const ClassRegistry* registry = nullptr);
void save_embeddings(const EmbeddingTable& table, const std::filesystem::path& path);

/// UME1 byte encoding, shared by save_embeddings and the tests.
std::vector<std::uint8_t> encode_ume1(const EmbeddingTable& table);
EmbeddingTable decode_ume1(const std::vector<std::uint8_t>& bytes, const ClassRegistry* registry = nullptr);

EmbeddingTable one_hot_table(const ClassRegistry& registry);
/// One-hot plus the parent bit(s) on tumor and cyst rows.
EmbeddingTable few_hot_table(const ClassRegistry& registry);

/// Pairwise cosine similarity of the table rows.
Eigen::MatrixXd cosine_similarity_matrix(const EmbeddingTable& table);

struct SynthSpec {
  std::vector<std::string> names;
  int dimension = 512;
  /// Sizes of consecutive class groups; empty means one group per class.
  std::vector<int> groups;
  /// Required gap between the least similar same-group pair and the most
  /// similar cross-group pair.
  double margin = 0.3;
};

/// Unit-norm vectors clustered by group, deterministic in `seed`.
EmbeddingTable synth_embeddings(std::uint64_t seed, const SynthSpec& spec);

/// Same-group minimum minus cross-group maximum similarity. Missing pairs
/// count as 1 (same group) and -1 (cross group).
double group_margin(const Eigen::MatrixXd& similarity, const std::vector<int>& groups);

}  // namespace umseg
