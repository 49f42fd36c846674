// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <cmath>
#include <cstring>

#include "oracles.hpp"
#include "umseg/binary_io.hpp"
#include "umseg/embedding.hpp"

using namespace umseg;

namespace {

EmbeddingTable random_table(int k, int d, std::uint64_t seed) {
  Rng rng(seed);
  EmbeddingTable t;
  for (int i = 0; i < k; ++i) t.names.push_back("class " + std::to_string(i));
  t.vectors.resize(k, d);
  for (Index i = 0; i < t.vectors.size(); ++i) t.vectors.data()[i] = static_cast<float>(rng.normal() * 3.0);
  return t;
}

double cosine(const Eigen::VectorXf& a, const Eigen::VectorXf& b) {
  double dot = 0, na = 0, nb = 0;
  for (Index i = 0; i < a.size(); ++i) {
    dot += double(a[i]) * b[i];
    na += double(a[i]) * a[i];
    nb += double(b[i]) * b[i];
  }
  return dot / std::sqrt(na * nb);
}

EmbeddingLoadFailure failure_of(const std::vector<std::uint8_t>& bytes, const ClassRegistry* r = nullptr) {
  try {
    decode_ume1(bytes, r);
  } catch (const EmbeddingLoadError& e) {
    return e.reason();
  }
  FAIL("decode accepted invalid input");
  return EmbeddingLoadFailure::io;
}

}  // namespace

TEST_CASE("prompt templates render the class name verbatim") {
  CHECK(render_prompt(PromptTemplate::standard(TemplateId::V3), "liver") == "A computerized tomography of a liver.");
  CHECK(render_prompt(PromptTemplate::standard(TemplateId::V2), "pancreas") ==
        "There is pancreas in this computerized tomography.");
  CHECK(render_prompt(PromptTemplate::standard(TemplateId::V1), "spleen") == "A photo of a spleen.");
  CHECK(render_prompt(PromptTemplate::standard(TemplateId::V1), "aorta") == "A photo of a aorta.");
}

TEST_CASE("prompt length follows the placeholder substitution") {
  const std::string cls = "[CLS]";
  for (auto id : {TemplateId::V1, TemplateId::V2, TemplateId::V3}) {
    const auto t = PromptTemplate::standard(id);
    for (std::string name : {"", "x", "Portal Vein and Splenic Vein"})
      CHECK(render_prompt(t, name).size() == t.pattern.size() - cls.size() + name.size());
  }
}

TEST_CASE("templates need exactly one placeholder") {
  CHECK_THROWS_AS(PromptTemplate(TemplateId::V1, "no placeholder"), ValidationError);
  CHECK_THROWS_AS(PromptTemplate(TemplateId::V1, "[CLS] and [CLS]"), ValidationError);
  CHECK_NOTHROW(PromptTemplate(TemplateId::V1, "[CLS]"));
  CHECK(parse_template_id("V2") == TemplateId::V2);
  CHECK_THROWS_AS(parse_template_id("V4"), ValidationError);
}

TEST_CASE("UME1 round trip is bitwise") {
  auto t = random_table(5, 7, 1);
  t.names[2] = "Prostate/Uterus";
  t.vectors(1, 3) = -0.0f;
  t.vectors(4, 6) = 1e-38f;
  const auto bytes = encode_ume1(t);
  const auto back = decode_ume1(bytes);
  CHECK(back.names == t.names);
  CHECK(std::memcmp(back.vectors.data(), t.vectors.data(), sizeof(float) * t.vectors.size()) == 0);
  CHECK(back.same_content(t));

  const auto dir = oracle::scratch_dir("ume1");
  save_embeddings(t, dir / "t.ume");
  CHECK(load_embeddings(dir / "t.ume").same_content(t));
}

TEST_CASE("UME1 byte layout matches the format arithmetic") {
  const auto t = random_table(32, 512, 2);
  const auto bytes = encode_ume1(t);
  std::size_t names = 0;
  for (const auto& n : t.names) names += n.size();
  CHECK(bytes.size() == 12 + 32 * 2 + names + 32 * 512 * 4);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "UME1");
  ByteReader r(bytes, "test");
  r.text(4);
  CHECK(r.uint<std::uint32_t>() == 32);
  CHECK(r.uint<std::uint32_t>() == 512);
  CHECK(r.uint<std::uint16_t>() == t.names[0].size());
  CHECK(r.text(t.names[0].size()) == t.names[0]);
  CHECK(r.f32() == t.vectors(0, 0));
  const auto back = decode_ume1(bytes);
  CHECK(back.classes() == 32);
  CHECK(back.dimension() == 512);
}

TEST_CASE("UME1 decoding distinguishes failure reasons") {
  const auto t = random_table(3, 4, 3);
  auto bytes = encode_ume1(t);
  auto bad = bytes;
  std::memcpy(bad.data(), "XXXX", 4);
  CHECK(failure_of(bad) == EmbeddingLoadFailure::bad_magic);
  for (std::size_t cut : {std::size_t{2}, std::size_t{9}, bytes.size() - 1}) {
    std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    CHECK(failure_of(truncated) == EmbeddingLoadFailure::truncated);
  }
  const ClassRegistry r({{"a", 1, ClassKind::organ, {}}, {"b", 2, ClassKind::organ, {}}, {"c", 3, ClassKind::organ, {}}});
  CHECK(failure_of(bytes, &r) == EmbeddingLoadFailure::registry_mismatch);
  auto named = t;
  named.names = {"a", "b", "c"};
  CHECK_NOTHROW(decode_ume1(encode_ume1(named), &r));
  CHECK_THROWS_AS(load_embeddings("/nonexistent/t.ume"), EmbeddingLoadError);
}

TEST_CASE("one-hot rows form the identity") {
  const ClassRegistry r = build_registry();
  const auto t = one_hot_table(r);
  CHECK(t.kind == EncodingKind::one_hot);
  CHECK(t.names == r.names());
  CHECK(t.vectors.cast<double>().isApprox(Eigen::MatrixXd::Identity(32, 32)));
  CHECK(cosine_similarity_matrix(t).isApprox(Eigen::MatrixXd::Identity(32, 32)));
}

TEST_CASE("few-hot reproduces the liver, liver tumor, pancreas example") {
  const auto t = few_hot_table(build_registry().subset({"Liver", "Liver Tumor", "Pancreas"}));
  Eigen::MatrixXf want(3, 3);
  want << 1, 0, 0, 1, 1, 0, 0, 0, 1;
  CHECK(t.vectors == want);
}

TEST_CASE("few-hot row sums follow the parent links") {
  const ClassRegistry r = build_registry();
  const auto t = few_hot_table(r);
  CHECK(t.dimension() == 32);
  for (const auto& e : r.entries()) {
    const auto row = t.vectors.row(e.index - 1);
    for (Index j = 0; j < row.size(); ++j) CHECK((row[j] == 0.0f || row[j] == 1.0f));
    CHECK(row[e.index - 1] == 1.0f);
    for (int p : e.parents) CHECK(row[p - 1] == 1.0f);
    if (e.kind == ClassKind::organ)
      CHECK(row.sum() == 1.0f);
    else
      CHECK(row.sum() >= 2.0f);
  }
}

TEST_CASE("cosine similarity of identical, orthogonal and antipodal vectors") {
  EmbeddingTable t;
  t.names = {"a", "b", "c", "d"};
  t.vectors.resize(4, 3);
  t.vectors << 1, 2, 3, 1, 2, 3, -1, -2, -3, 3, 0, -1;
  const auto s = cosine_similarity_matrix(t);
  CHECK(s(0, 1) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s(0, 2) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(s(0, 3) == doctest::Approx(0.0));
  t.vectors.row(3).setZero();
  try {
    cosine_similarity_matrix(t);
    FAIL("zero vector accepted");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("'d'") != std::string::npos);
  }
}

TEST_CASE("similarity matrix is symmetric with unit diagonal and agrees with direct cosines") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto t = random_table(6, 10, seed);
    const auto s = cosine_similarity_matrix(t);
    for (int i = 0; i < 6; ++i) {
      CHECK(std::abs(s(i, i) - 1.0) <= 1e-6);
      for (int j = 0; j < 6; ++j) {
        CHECK(s(i, j) == s(j, i));
        CHECK(s(i, j) >= -1.0);
        CHECK(s(i, j) <= 1.0);
        CHECK(s(i, j) == doctest::Approx(cosine(t.vectors.row(i), t.vectors.row(j))).epsilon(1e-9));
      }
    }
  }
}

TEST_CASE("synthetic tables separate groups by the requested margin") {
  SynthSpec spec;
  spec.names = {"a", "b", "c", "d"};
  spec.groups = {2, 2};
  spec.margin = 0.3;
  spec.dimension = 64;
  const auto t = synth_embeddings(42, spec);
  const int group[4] = {0, 0, 1, 1};
  double within = 1.0, cross = -1.0;
  for (int i = 0; i < 4; ++i) {
    CHECK(t.vectors.row(i).norm() == doctest::Approx(1.0).epsilon(1e-6));
    for (int j = i + 1; j < 4; ++j) {
      const double c = cosine(t.vectors.row(i), t.vectors.row(j));
      if (group[i] == group[j])
        within = std::min(within, c);
      else
        cross = std::max(cross, c);
    }
  }
  CHECK(within - cross >= 0.3 - 1e-6);
  CHECK(synth_embeddings(42, spec).same_content(t));
  CHECK_FALSE(synth_embeddings(43, spec).same_content(t));
}

TEST_CASE("synthetic table edge cases") {
  SynthSpec one;
  one.names = {"only"};
  one.dimension = 5;
  const auto t = synth_embeddings(1, one);
  CHECK(t.classes() == 1);
  CHECK(t.vectors.row(0).norm() == doctest::Approx(1.0).epsilon(1e-6));

  SynthSpec bad;
  bad.names = {"a", "b", "c"};
  bad.groups = {2, 2};
  CHECK_THROWS_AS(synth_embeddings(1, bad), ValidationError);
  bad.groups = {1, 1, 1};
  bad.dimension = 2;
  CHECK_THROWS_AS(synth_embeddings(1, bad), ValidationError);
}

TEST_CASE("reordering follows names") {
  const auto t = random_table(3, 2, 8);
  const auto r = t.reordered({t.names[2], t.names[0], t.names[1]});
  CHECK(r.vectors.row(0) == t.vectors.row(2));
  CHECK(r.vectors.row(1) == t.vectors.row(0));
  CHECK_THROWS_AS(t.reordered({"nope", t.names[0], t.names[1]}), ValidationError);
}
