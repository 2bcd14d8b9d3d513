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
#include <algorithm>
#include <bit>
#include <numeric>

#include "normlab/data.hpp"

namespace normlab {

namespace {

constexpr std::size_t kGlyphSide = 5;
constexpr std::size_t kMaxGlyphs = 256;

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

// Greedy draw of 25-bit patterns with 9..16 pixels set, each at Hamming
// distance >= 5 from all earlier ones.
const std::vector<std::uint32_t>& glyph_table() {
  static const std::vector<std::uint32_t> table = [] {
    std::vector<std::uint32_t> out;
    std::mt19937_64 rng(0x61797068ULL);
    while (out.size() < kMaxGlyphs) {
      const auto bits = static_cast<std::uint32_t>(rng() & ((1u << 25) - 1));
      const int ones = std::popcount(bits);
      if (ones < 9 || ones > 16) continue;
      bool far = true;
      for (auto o : out) {
        if (std::popcount(o ^ bits) < 5) {
          far = false;
          break;
        }
      }
      if (far) out.push_back(bits);
    }
    return out;
  }();
  return table;
}

SqoopSample draw_sample(const Question& q, bool answer, const SqoopConfig& cfg, std::mt19937_64& rng) {
  const std::size_t cells = cfg.grid * cfg.grid;
  const std::size_t objects = std::min(cfg.objects_per_image, cfg.alphabet);
  SqoopSample s;
  s.question = q;
  s.answer = answer;
  Placement px{q.x, 0, 0}, py{q.y, 0, 0};
  std::size_t cx = 0, cy = 0;
  do {
    cx = uniform_index(rng, cells);
    cy = uniform_index(rng, cells);
    px.row = cx / cfg.grid;
    px.col = cx % cfg.grid;
    py.row = cy / cfg.grid;
    py.col = cy % cfg.grid;
  } while (cx == cy || relation_holds(q.r, px, py) != answer);
  s.objects = {px, py};

  std::vector<std::size_t> glyphs;
  for (std::size_t g = 0; g < cfg.alphabet; ++g) {
    if (g != q.x && g != q.y) glyphs.push_back(g);
  }
  std::vector<std::size_t> free_cells;
  for (std::size_t c = 0; c < cells; ++c) {
    if (c != cx && c != cy) free_cells.push_back(c);
  }
  for (std::size_t k = 2; k < objects; ++k) {
    const std::size_t gi = uniform_index(rng, glyphs.size());
    const std::size_t ci = uniform_index(rng, free_cells.size());
    s.objects.push_back({glyphs[gi], free_cells[ci] / cfg.grid, free_cells[ci] % cfg.grid});
    glyphs.erase(glyphs.begin() + static_cast<std::ptrdiff_t>(gi));
    free_cells.erase(free_cells.begin() + static_cast<std::ptrdiff_t>(ci));
  }
  return s;
}

std::vector<SqoopSample> draw_split(const std::vector<Question>& questions, std::size_t size,
                                    const SqoopConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<SqoopSample> out;
  out.reserve(size);
  Question q;
  for (std::size_t i = 0; i < size; ++i) {
    if (i % 2 == 0) q = questions[uniform_index(rng, questions.size())];
    out.push_back(draw_sample(q, i % 2 == 0, cfg, rng));
  }
  return out;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::string to_string(Relation r) {
  switch (r) {
    case Relation::LeftOf:
      return "left_of";
    case Relation::RightOf:
      return "right_of";
    case Relation::Above:
      return "above";
    case Relation::Below:
      return "below";
  }
  return "?";
}

bool relation_holds(Relation r, const Placement& x, const Placement& y) {
  switch (r) {
    case Relation::LeftOf:
      return x.col < y.col;
    case Relation::RightOf:
      return x.col > y.col;
    case Relation::Above:
      return x.row < y.row;
    case Relation::Below:
      return x.row > y.row;
  }
  return false;
}

std::vector<std::size_t> Question::tokens(std::size_t alphabet) const {
  return {x, alphabet + static_cast<std::size_t>(r), y};
}

void SqoopConfig::validate() const {
  if (alphabet < 2 || alphabet > kMaxGlyphs) {
    throw ConfigError("alphabet must be in [2, " + std::to_string(kMaxGlyphs) + "], got " + std::to_string(alphabet));
  }
  if (rhs_per_lhs < 1 || rhs_per_lhs > alphabet - 1) {
    throw ConfigError("rhs_per_lhs must satisfy 1 <= k <= alphabet - 1 = " + std::to_string(alphabet - 1) +
                      ", got " + std::to_string(rhs_per_lhs));
  }
  if (grid < 2) throw ConfigError("grid must be at least 2 cells per side");
  if (cell < kGlyphSide) throw ConfigError("cell must be at least 5 pixels");
  if (objects_per_image < 2 || objects_per_image > grid * grid) {
    throw ConfigError("objects_per_image must be in [2, grid * grid = " + std::to_string(grid * grid) + "]");
  }
  if (train_size == 0 || val_size == 0 || test_size == 0) throw ConfigError("split sizes must be positive");
}

nlohmann::json to_json(const SqoopConfig& c) {
  return {{"alphabet", c.alphabet},
          {"grid", c.grid},
          {"cell", c.cell},
          {"objects_per_image", c.objects_per_image},
          {"rhs_per_lhs", c.rhs_per_lhs},
          {"train_size", c.train_size},
          {"val_size", c.val_size},
          {"test_size", c.test_size},
          {"encoding", c.encoding == ImageEncoding::OneHot ? "onehot" : "grayscale"},
          {"seed", c.seed}};
}

SqoopConfig sqoop_config_from_json(const nlohmann::json& j) {
  SqoopConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "alphabet") c.alphabet = v.get<std::size_t>();
    else if (key == "grid") c.grid = v.get<std::size_t>();
    else if (key == "cell") c.cell = v.get<std::size_t>();
    else if (key == "objects_per_image") c.objects_per_image = v.get<std::size_t>();
    else if (key == "rhs_per_lhs") c.rhs_per_lhs = v.get<std::size_t>();
    else if (key == "train_size") c.train_size = v.get<std::size_t>();
    else if (key == "val_size") c.val_size = v.get<std::size_t>();
    else if (key == "test_size") c.test_size = v.get<std::size_t>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "encoding") {
      const auto e = v.get<std::string>();
      if (e == "grayscale") c.encoding = ImageEncoding::Grayscale;
      else if (e == "onehot") c.encoding = ImageEncoding::OneHot;
      else throw ConfigError("encoding must be grayscale or onehot, got '" + e + "'");
    } else {
      throw ConfigError("unknown sqoop config key '" + key + "'");
    }
  }
  return c;
}

const std::vector<SqoopSample>& SqoopDataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "validation" || name == "val") return validation;
  if (name == "test") return test;
  throw ConfigError("unknown split '" + name + "'");
}

std::vector<std::vector<std::size_t>> rhs_partners(const SqoopConfig& cfg) {
  cfg.validate();
  std::vector<std::size_t> perm(cfg.alphabet);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(mix_seed(cfg.seed, 1));
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<std::size_t>> partners(cfg.alphabet);
  for (std::size_t i = 0; i < cfg.alphabet; ++i) {
    for (std::size_t j = 1; j <= cfg.rhs_per_lhs; ++j) partners[perm[i]].push_back(perm[(i + j) % cfg.alphabet]);
  }
  return partners;
}

std::vector<Question> train_triples(const SqoopConfig& cfg) {
  auto partners = rhs_partners(cfg);
  std::vector<Question> out;
  for (std::size_t x = 0; x < cfg.alphabet; ++x) {
    for (std::size_t r = 0; r < kNumRelations; ++r) {
      for (std::size_t y : partners[x]) out.push_back({x, static_cast<Relation>(r), y});
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<Question> all_triples(const SqoopConfig& cfg) {
  std::vector<Question> out;
  for (std::size_t x = 0; x < cfg.alphabet; ++x) {
    for (std::size_t r = 0; r < kNumRelations; ++r) {
      for (std::size_t y = 0; y < cfg.alphabet; ++y) {
        if (x != y) out.push_back({x, static_cast<Relation>(r), y});
      }
    }
  }
  return out;
}

SqoopDataset gen_sqoop(const SqoopConfig& cfg) {
  cfg.validate();
  SqoopDataset ds;
  ds.config = cfg;
  ds.train_triples = train_triples(cfg);
  ds.test_triples = all_triples(cfg);
  ds.train = draw_split(ds.train_triples, cfg.train_size, cfg, mix_seed(cfg.seed, 2));
  ds.validation = draw_split(ds.train_triples, cfg.val_size, cfg, mix_seed(cfg.seed, 3));
  ds.test = draw_split(ds.test_triples, cfg.test_size, cfg, mix_seed(cfg.seed, 4));
  return ds;
}

std::vector<std::uint8_t> glyph_pattern(std::size_t glyph) {
  if (glyph >= kMaxGlyphs) throw ConfigError("glyph id " + std::to_string(glyph) + " out of range");
  const std::uint32_t bits = glyph_table()[glyph];
  std::vector<std::uint8_t> out(kGlyphSide * kGlyphSide);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (bits >> i) & 1u;
  return out;
}

std::vector<double> render_scene(const std::vector<Placement>& objects, const SqoopConfig& cfg) {
  const std::size_t side = cfg.pixels(), C = cfg.channels();
  std::vector<double> img(C * side * side, 0.0);
  std::vector<bool> used(cfg.grid * cfg.grid, false);
  const std::size_t off = (cfg.cell - kGlyphSide) / 2;
  for (const auto& p : objects) {
    if (p.row >= cfg.grid || p.col >= cfg.grid) throw ConfigError("placement outside the grid");
    if (p.glyph >= cfg.alphabet) throw ConfigError("glyph " + std::to_string(p.glyph) + " outside the alphabet");
    const std::size_t cell = p.row * cfg.grid + p.col;
    if (used[cell]) {
      throw ConfigError("overlapping placements at cell (" + std::to_string(p.row) + "," + std::to_string(p.col) + ")");
    }
    used[cell] = true;
    const auto pat = glyph_pattern(p.glyph);
    const std::size_t ch = cfg.encoding == ImageEncoding::OneHot ? p.glyph : 0;
    for (std::size_t i = 0; i < kGlyphSide; ++i) {
      for (std::size_t j = 0; j < kGlyphSide; ++j) {
        const std::size_t y = p.row * cfg.cell + off + i, x = p.col * cfg.cell + off + j;
        img[(ch * side + y) * side + x] = pat[i * kGlyphSide + j];
      }
    }
  }
  return img;
}

SqoopBatch make_batch(const std::vector<SqoopSample>& samples, std::span<const std::size_t> indices,
                      const SqoopConfig& cfg) {
  if (indices.empty()) throw ShapeError("make_batch: empty batch");
  const std::size_t side = cfg.pixels(), C = cfg.channels(), per = C * side * side;
  std::vector<double> pixels;
  pixels.reserve(indices.size() * per);
  SqoopBatch b;
  for (std::size_t i : indices) {
    const auto& s = samples.at(i);
    auto img = render_scene(s.objects, cfg);
    pixels.insert(pixels.end(), img.begin(), img.end());
    b.questions.push_back(s.question.tokens(cfg.alphabet));
    b.labels.push_back(s.answer ? 1 : 0);
  }
  b.images = Tensor({indices.size(), C, side, side}, std::move(pixels));
  return b;
}

}  // namespace normlab
