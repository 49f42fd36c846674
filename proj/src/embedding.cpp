// SPDX-License-Identifier: Apache-2.0
#include "umseg/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <map>

#include <Eigen/QR>

#include "umseg/binary_io.hpp"

namespace umseg {

std::string to_string(TemplateId id) {
  switch (id) {
    case TemplateId::V1: return "V1";
    case TemplateId::V2: return "V2";
    case TemplateId::V3: return "V3";
  }
  return "?";
}

TemplateId parse_template_id(const std::string& text) {
  if (text == "V1") return TemplateId::V1;
  if (text == "V2") return TemplateId::V2;
  if (text == "V3") return TemplateId::V3;
  throw ValidationError("unknown prompt template '" + text + "' (expected V1, V2 or V3)");
}

PromptTemplate::PromptTemplate(TemplateId template_id, std::string text) : id(template_id), pattern(std::move(text)) {
  const std::string token = kClassPlaceholder;
  const auto first = pattern.find(token);
  if (first == std::string::npos || pattern.find(token, first + 1) != std::string::npos)
    throw ValidationError("prompt pattern must contain exactly one " + token + ": '" + pattern + "'");
}

PromptTemplate PromptTemplate::standard(TemplateId id) {
  switch (id) {
    case TemplateId::V1: return {id, "A photo of a [CLS]."};
    case TemplateId::V2: return {id, "There is [CLS] in this computerized tomography."};
    case TemplateId::V3: return {id, "A computerized tomography of a [CLS]."};
  }
  throw ValidationError("unknown prompt template");
}

std::string render_prompt(const PromptTemplate& tmpl, const std::string& class_name) {
  std::string out = tmpl.pattern;
  out.replace(out.find(kClassPlaceholder), std::strlen(kClassPlaceholder), class_name);
  return out;
}

std::string to_string(EncodingKind kind) {
  switch (kind) {
    case EncodingKind::clip: return "clip";
    case EncodingKind::one_hot: return "one-hot";
    case EncodingKind::few_hot: return "few-hot";
    case EncodingKind::synthetic: return "synthetic";
  }
  return "?";
}

EncodingKind parse_encoding_kind(const std::string& text) {
  if (text == "clip") return EncodingKind::clip;
  if (text == "one-hot") return EncodingKind::one_hot;
  if (text == "few-hot") return EncodingKind::few_hot;
  if (text == "synthetic") return EncodingKind::synthetic;
  throw ValidationError("unknown encoding kind '" + text + "'");
}

bool EmbeddingTable::same_content(const EmbeddingTable& other) const {
  if (names != other.names || vectors.rows() != other.vectors.rows() || vectors.cols() != other.vectors.cols())
    return false;
  return std::memcmp(vectors.data(), other.vectors.data(), sizeof(float) * static_cast<std::size_t>(vectors.size())) == 0;
}

EmbeddingTable EmbeddingTable::reordered(const std::vector<std::string>& order) const {
  EmbeddingTable out = *this;
  out.names = order;
  out.vectors.resize(static_cast<Index>(order.size()), vectors.cols());
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto it = std::find(names.begin(), names.end(), order[i]);
    if (it == names.end()) throw ValidationError("embedding table has no class '" + order[i] + "'");
    out.vectors.row(static_cast<Index>(i)) = vectors.row(it - names.begin());
  }
  return out;
}

// ------------------------------------------------------------------- UME1

std::vector<std::uint8_t> encode_ume1(const EmbeddingTable& table) {
  if (static_cast<Index>(table.names.size()) != table.vectors.rows())
    throw ValidationError("embedding table has " + std::to_string(table.names.size()) + " names for " +
                          std::to_string(table.vectors.rows()) + " vectors");
  ByteWriter w;
  w.text("UME1");
  w.uint(static_cast<std::uint32_t>(table.classes()));
  w.uint(static_cast<std::uint32_t>(table.dimension()));
  for (int k = 0; k < table.classes(); ++k) {
    const std::string& name = table.names[static_cast<std::size_t>(k)];
    if (name.size() > 0xFFFF) throw ValidationError("class name longer than 65535 bytes");
    w.uint(static_cast<std::uint16_t>(name.size()));
    w.text(name);
    for (int d = 0; d < table.dimension(); ++d) w.f32(table.vectors(k, d));
  }
  return w.take();
}

EmbeddingTable decode_ume1(const std::vector<std::uint8_t>& bytes, const ClassRegistry* registry) {
  using F = EmbeddingLoadFailure;
  ByteReader r(bytes, "UME1 embedding file");
  EmbeddingTable table;
  try {
    if (bytes.size() < 4 || r.text(4) != "UME1") {
      const std::string got(bytes.begin(), bytes.begin() + static_cast<long>(std::min<std::size_t>(4, bytes.size())));
      if (got.size() < 4 && std::string_view("UME1").starts_with(got))
        throw EmbeddingLoadError(F::truncated, "truncated UME1 embedding file: " + std::to_string(bytes.size()) + " bytes");
      throw EmbeddingLoadError(F::bad_magic, "bad magic '" + got + "' (expected UME1)");
    }
    const auto k = r.uint<std::uint32_t>();
    const auto d = r.uint<std::uint32_t>();
    // Each record needs at least 2 + 4*D bytes.
    if (static_cast<std::uint64_t>(k) * (2 + 4ull * d) > r.remaining())
      throw EmbeddingLoadError(F::truncated, "truncated UME1 file: header declares K=" + std::to_string(k) +
                                                 ", D=" + std::to_string(d) + " but only " +
                                                 std::to_string(r.remaining()) + " payload bytes follow");
    table.vectors.resize(k, d);
    for (std::uint32_t i = 0; i < k; ++i) {
      const auto len = r.uint<std::uint16_t>();
      table.names.push_back(r.text(len));
      for (std::uint32_t j = 0; j < d; ++j) table.vectors(i, j) = r.f32();
    }
  } catch (const TruncatedInput& e) {
    throw EmbeddingLoadError(F::truncated, e.what());
  }
  if (r.remaining() != 0)
    throw EmbeddingLoadError(F::malformed,
                             "UME1 file has " + std::to_string(r.remaining()) + " trailing bytes after the last record");
  if (registry) {
    const auto expected = registry->names();
    if (table.names != expected) {
      std::string detail = "embedding table has " + std::to_string(table.names.size()) + " classes, registry " +
                           std::to_string(expected.size());
      for (std::size_t i = 0; i < std::min(expected.size(), table.names.size()); ++i)
        if (expected[i] != table.names[i]) {
          detail = "class " + std::to_string(i + 1) + " is '" + table.names[i] + "', registry expects '" +
                   expected[i] + "'";
          break;
        }
      throw EmbeddingLoadError(F::registry_mismatch, "embedding names do not match registry: " + detail);
    }
  }
  return table;
}

EmbeddingTable load_embeddings(const std::filesystem::path& path, const ClassRegistry* registry) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file(path);
  } catch (const ValidationError& e) {
    throw EmbeddingLoadError(EmbeddingLoadFailure::io, e.what());
  }
  return decode_ume1(bytes, registry);
}

void save_embeddings(const EmbeddingTable& table, const std::filesystem::path& path) {
  write_file(path, encode_ume1(table));
}

// ----------------------------------------------------------- fixed codes

EmbeddingTable one_hot_table(const ClassRegistry& registry) {
  EmbeddingTable t;
  t.kind = EncodingKind::one_hot;
  t.names = registry.names();
  t.vectors = Eigen::MatrixXf::Identity(registry.size(), registry.size());
  return t;
}

EmbeddingTable few_hot_table(const ClassRegistry& registry) {
  EmbeddingTable t = one_hot_table(registry);
  t.kind = EncodingKind::few_hot;
  for (const ClassEntry& e : registry.entries())
    for (int p : e.parents) t.vectors(e.index - 1, p - 1) = 1.0f;
  return t;
}

Eigen::MatrixXd cosine_similarity_matrix(const EmbeddingTable& table) {
  Eigen::MatrixXd v = table.vectors.cast<double>();
  for (Index k = 0; k < v.rows(); ++k) {
    const double n = v.row(k).norm();
    if (!(n > 0.0))
      throw ValidationError("class '" + table.names.at(static_cast<std::size_t>(k)) + "' has a zero-norm embedding");
    v.row(k) /= n;
  }
  Eigen::MatrixXd s = v * v.transpose();
  for (Index i = 0; i < s.rows(); ++i) {
    for (Index j = 0; j < i; ++j) s(j, i) = s(i, j);
  }
  return s.cwiseMax(-1.0).cwiseMin(1.0);
}

// --------------------------------------------------------------- synthetic

namespace {

std::vector<int> group_of(const std::vector<int>& sizes, int k) {
  std::vector<int> g;
  if (sizes.empty()) {
    for (int i = 0; i < k; ++i) g.push_back(i);
    return g;
  }
  for (std::size_t i = 0; i < sizes.size(); ++i)
    for (int j = 0; j < sizes[i]; ++j) g.push_back(static_cast<int>(i));
  return g;
}

}  // namespace

double group_margin(const Eigen::MatrixXd& similarity, const std::vector<int>& groups) {
  const auto g = group_of(groups, static_cast<int>(similarity.rows()));
  double within = 1.0, cross = -1.0;
  for (Index i = 0; i < similarity.rows(); ++i)
    for (Index j = i + 1; j < similarity.cols(); ++j) {
      if (g[static_cast<std::size_t>(i)] == g[static_cast<std::size_t>(j)])
        within = std::min(within, similarity(i, j));
      else
        cross = std::max(cross, similarity(i, j));
    }
  return within - cross;
}

EmbeddingTable synth_embeddings(std::uint64_t seed, const SynthSpec& spec) {
  const int k = static_cast<int>(spec.names.size());
  const int d = spec.dimension;
  if (k < 1) throw ValidationError("synthetic table needs at least one class");
  int total = 0;
  for (int s : spec.groups) {
    if (s < 1) throw ValidationError("synthetic group sizes must be positive");
    total += s;
  }
  if (!spec.groups.empty() && total != k)
    throw ValidationError("group sizes sum to " + std::to_string(total) + ", expected " + std::to_string(k));
  const auto g = group_of(spec.groups, k);
  const int n_groups = g.back() + 1;
  if (d < n_groups)
    throw ValidationError("dimension " + std::to_string(d) + " is smaller than the group count " +
                          std::to_string(n_groups));
  if (spec.margin >= 1.0) throw ValidationError("margin must be below 1");

  EmbeddingTable t;
  t.kind = EncodingKind::synthetic;
  t.names = spec.names;

  // Orthonormal group directions, then per-class noise. The noise scale
  // shrinks until the margin holds; the limit (no noise) gives margin 1.
  double noise = 0.35;
  for (int attempt = 0; attempt < 64; ++attempt, noise *= 0.7) {
    Rng rng(seed);
    Eigen::MatrixXd basis(d, n_groups);
    for (Index i = 0; i < basis.size(); ++i) basis.data()[i] = rng.normal();
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(basis).householderQ() *
                              Eigen::MatrixXd::Identity(d, n_groups);
    t.vectors.resize(k, d);
    for (int i = 0; i < k; ++i) {
      Eigen::VectorXd n(d);
      for (int j = 0; j < d; ++j) n[j] = rng.normal();
      Eigen::VectorXd v = q.col(g[static_cast<std::size_t>(i)]) + noise * n / n.norm();
      t.vectors.row(i) = (v / v.norm()).cast<float>().transpose();
    }
    if (group_margin(cosine_similarity_matrix(t), spec.groups) >= spec.margin) return t;
  }
  throw RuntimeFailure("could not reach the requested synthetic embedding margin");
}

}  // namespace umseg
