/* Copyright 2026 The NormLab Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License. */
#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "normlab/tensor.hpp"

namespace normlab {

// ---- spatial-relation questions ---------------------------------------------

enum class Relation { LeftOf = 0, RightOf = 1, Above = 2, Below = 3 };
inline constexpr std::size_t kNumRelations = 4;

std::string to_string(Relation r);

/// One glyph on the cell grid.
struct Placement {
  std::size_t glyph = 0;
  std::size_t row = 0;
  std::size_t col = 0;
  bool operator==(const Placement&) const = default;
};

/// LeftOf: col(x) < col(y); RightOf: col(x) > col(y); Above: row(x) < row(y);
/// Below: row(x) > row(y).
bool relation_holds(Relation r, const Placement& x, const Placement& y);

enum class ImageEncoding { Grayscale, OneHot };

struct SqoopConfig {
  std::size_t alphabet = 10;
  std::size_t grid = 5;  // cells per side
  std::size_t cell = 7;  // pixels per cell side
  std::size_t objects_per_image = 5;
  std::size_t rhs_per_lhs = 1;
  std::size_t train_size = 20000;
  std::size_t val_size = 2000;
  std::size_t test_size = 4000;
  ImageEncoding encoding = ImageEncoding::Grayscale;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the violated constraint.
  void validate() const;
  std::size_t channels() const { return encoding == ImageEncoding::OneHot ? alphabet : 1; }
  std::size_t pixels() const { return grid * cell; }
  /// Token vocabulary of the question encoder: glyphs, then relations.
  std::size_t vocab() const { return alphabet + kNumRelations; }
};

nlohmann::json to_json(const SqoopConfig& c);
SqoopConfig sqoop_config_from_json(const nlohmann::json& j);

struct Question {
  std::size_t x = 0;
  Relation r = Relation::LeftOf;
  std::size_t y = 0;
  bool operator==(const Question&) const = default;
  auto operator<=>(const Question& o) const {
    return std::array<std::size_t, 3>{x, static_cast<std::size_t>(r), y} <=>
           std::array<std::size_t, 3>{o.x, static_cast<std::size_t>(o.r), o.y};
  }
  /// Encoder tokens: x, alphabet + r, y.
  std::vector<std::size_t> tokens(std::size_t alphabet) const;
};

struct SqoopSample {
  std::vector<Placement> objects;  // objects[0] is x, objects[1] is y
  Question question;
  bool answer = false;
};

struct SqoopDataset {
  SqoopConfig config;
  std::vector<Question> train_triples;
  std::vector<Question> test_triples;
  std::vector<SqoopSample> train;
  std::vector<SqoopSample> validation;
  std::vector<SqoopSample> test;

  const std::vector<SqoopSample>& split(const std::string& name) const;
};

/// rhs partners of every lhs glyph: partners[x] holds rhs_per_lhs glyphs,
/// assigned by walking a seeded permutation of the alphabet.
std::vector<std::vector<std::size_t>> rhs_partners(const SqoopConfig& cfg);

std::vector<Question> train_triples(const SqoopConfig& cfg);
/// Every (x, r, y) with x != y.
std::vector<Question> all_triples(const SqoopConfig& cfg);

/// Train questions use the restricted partner set; test questions cover all
/// pairs; validation reuses the train questions with fresh images. Each
/// split alternates yes and no samples drawn for the same question.
SqoopDataset gen_sqoop(const SqoopConfig& cfg);

/// 5 x 5 binary interior pattern of a glyph (row-major). Patterns are fixed
/// for a given glyph id and pairwise distinct.
std::vector<std::uint8_t> glyph_pattern(std::size_t glyph);

/// Rasterizes placements into [C, H, W] pixels (row-major).
std::vector<double> render_scene(const std::vector<Placement>& objects, const SqoopConfig& cfg);

struct SqoopBatch {
  Tensor images;
  std::vector<std::vector<std::size_t>> questions;
  std::vector<std::size_t> labels;
};
/// Renders samples[indices] as images [n, C, H, W] with their question
/// tokens and labels (1 = yes).
SqoopBatch make_batch(const std::vector<SqoopSample>& samples, std::span<const std::size_t> indices,
                      const SqoopConfig& cfg);

/// Deterministic 64-bit mixing of a seed with a stream tag.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag);

// ---- few-shot universe --------------------------------------------------------

struct FewshotConfig {
  std::size_t train_classes = 24;
  std::size_t val_classes = 8;
  std::size_t test_classes = 8;
  std::size_t per_class = 30;
  std::size_t image_size = 12;
  std::size_t channels = 3;
  double jitter = 0.1;
  std::uint64_t seed = 0;

  std::size_t num_classes() const { return train_classes + val_classes + test_classes; }
  void validate() const;
};

nlohmann::json to_json(const FewshotConfig& c);
FewshotConfig fewshot_config_from_json(const nlohmann::json& j);

/// Labeled image pool with disjoint class splits.
struct FewshotPool {
  FewshotConfig config;
  std::vector<std::vector<double>> images;  // each [channels, size, size]
  std::vector<std::size_t> labels;
  std::vector<std::size_t> train_classes;
  std::vector<std::size_t> val_classes;
  std::vector<std::size_t> test_classes;

  const std::vector<std::size_t>& split(const std::string& name) const;
  /// Indices of the samples of class `c`, ascending.
  std::vector<std::size_t> members(std::size_t c) const;
};

/// Each class combines a shape family, a color and a position; samples add
/// Gaussian pixel noise and an intensity change scaled by the jitter.
FewshotPool gen_fewshot_universe(const FewshotConfig& cfg);

struct EpisodeConfig {
  std::size_t ways = 5;
  std::size_t shots = 5;
  std::size_t queries = 5;  // per class
};

struct Episode {
  std::vector<std::size_t> classes;  // pool class ids, in episode label order
  std::vector<std::size_t> support;  // pool sample indices
  std::vector<std::size_t> support_labels;
  std::vector<std::size_t> query;
  std::vector<std::size_t> query_labels;
};

/// Classes are drawn uniformly without replacement from `classes`, then
/// shots + queries samples of each without replacement.
Episode sample_episode(const FewshotPool& pool, const std::vector<std::size_t>& classes, const EpisodeConfig& cfg,
                       std::uint64_t seed);

/// Stacks pool images into [indices.size(), C, H, W].
Tensor stack_images(const FewshotPool& pool, std::span<const std::size_t> indices);

// ---- serialization -------------------------------------------------------------

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

/// Little-endian 32-bit floats, base64 encoded.
std::string encode_pixels(std::span<const double> pixels);
std::vector<double> decode_pixels(const std::string& text);

nlohmann::json sample_to_json(const SqoopSample& s, const SqoopConfig& cfg);
SqoopSample sample_from_json(const nlohmann::json& j);

/// Writes train.jsonl, validation.jsonl, test.jsonl and manifest.json.
void write_sqoop(const SqoopDataset& ds, const std::filesystem::path& dir);
SqoopDataset read_sqoop(const std::filesystem::path& dir);

/// Writes pool.jsonl and manifest.json.
void write_fewshot(const FewshotPool& pool, const std::filesystem::path& dir);
FewshotPool read_fewshot(const std::filesystem::path& dir);

}  // namespace normlab
