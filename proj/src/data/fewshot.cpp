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
#include <cmath>
#include <numeric>

#include "normlab/data.hpp"

namespace normlab {

namespace {

constexpr std::size_t kFamilies = 8;
constexpr std::size_t kPositions = 4;

constexpr std::array<std::array<double, 3>, 6> kPalette = {{
    {1.0, 0.1, 0.1},
    {0.1, 1.0, 0.1},
    {0.1, 0.1, 1.0},
    {1.0, 1.0, 0.1},
    {1.0, 0.1, 1.0},
    {0.1, 1.0, 1.0},
}};

std::size_t max_classes() { return kFamilies * kPalette.size() * kPositions; }

// Membership of pixel (i, j) of an s x s box in shape family f.
bool in_shape(std::size_t f, std::size_t i, std::size_t j, std::size_t s) {
  const double c = (static_cast<double>(s) - 1.0) / 2.0;
  const double di = static_cast<double>(i) - c, dj = static_cast<double>(j) - c;
  const double r = std::sqrt(di * di + dj * dj);
  const double R = static_cast<double>(s) / 2.0;
  switch (f) {
    case 0:  // filled square
      return true;
    case 1:  // disk
      return r <= R * 0.9;
    case 2:  // ring
      return r <= R * 0.95 && r >= R * 0.5;
    case 3:  // plus
      return std::abs(di) < 1.0 || std::abs(dj) < 1.0;
    case 4:  // horizontal bars
      return i % 3 == 0;
    case 5:  // vertical bars
      return j % 3 == 0;
    case 6:  // diagonal
      return i == j || i + 1 == j || j + 1 == i;
    case 7:  // lower triangle
      return j <= i;
  }
  return false;
}

}  // namespace

void FewshotConfig::validate() const {
  if (train_classes == 0 || val_classes == 0 || test_classes == 0) {
    throw ConfigError("every class split needs at least one class");
  }
  if (num_classes() > max_classes()) {
    throw ConfigError("at most " + std::to_string(max_classes()) + " procedural classes exist, requested " +
                      std::to_string(num_classes()));
  }
  if (per_class == 0) throw ConfigError("per_class must be positive");
  if (image_size < 8 || image_size % 2 != 0) throw ConfigError("image_size must be even and at least 8");
  if (channels != 3) throw ConfigError("few-shot images have 3 channels");
  if (!(jitter >= 0)) throw ConfigError("jitter must be non-negative");
}

nlohmann::json to_json(const FewshotConfig& c) {
  return {{"train_classes", c.train_classes}, {"val_classes", c.val_classes}, {"test_classes", c.test_classes},
          {"per_class", c.per_class},         {"image_size", c.image_size},   {"channels", c.channels},
          {"jitter", c.jitter},               {"seed", c.seed}};
}

FewshotConfig fewshot_config_from_json(const nlohmann::json& j) {
  FewshotConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "train_classes") c.train_classes = v.get<std::size_t>();
    else if (key == "val_classes") c.val_classes = v.get<std::size_t>();
    else if (key == "test_classes") c.test_classes = v.get<std::size_t>();
    else if (key == "per_class") c.per_class = v.get<std::size_t>();
    else if (key == "image_size") c.image_size = v.get<std::size_t>();
    else if (key == "channels") c.channels = v.get<std::size_t>();
    else if (key == "jitter") c.jitter = v.get<double>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else throw ConfigError("unknown fewshot config key '" + key + "'");
  }
  return c;
}

const std::vector<std::size_t>& FewshotPool::split(const std::string& name) const {
  if (name == "train") return train_classes;
  if (name == "validation" || name == "val") return val_classes;
  if (name == "test") return test_classes;
  throw ConfigError("unknown split '" + name + "'");
}

std::vector<std::size_t> FewshotPool::members(std::size_t c) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == c) out.push_back(i);
  }
  return out;
}

FewshotPool gen_fewshot_universe(const FewshotConfig& cfg) {
  cfg.validate();
  FewshotPool pool;
  pool.config = cfg;
  std::vector<std::size_t> combos(max_classes());
  std::iota(combos.begin(), combos.end(), 0);
  std::mt19937_64 rng(mix_seed(cfg.seed, 10));
  std::shuffle(combos.begin(), combos.end(), rng);
  combos.resize(cfg.num_classes());

  const std::size_t S = cfg.image_size, half = S / 2, C = cfg.channels;
  std::mt19937_64 noise_rng(mix_seed(cfg.seed, 11));
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> gain(-1.0, 1.0);
  for (std::size_t cls = 0; cls < combos.size(); ++cls) {
    const std::size_t combo = combos[cls];
    const std::size_t family = combo % kFamilies;
    const auto& color = kPalette[(combo / kFamilies) % kPalette.size()];
    const std::size_t pos = combo / (kFamilies * kPalette.size());
    const std::size_t oi = (pos / 2) * half, oj = (pos % 2) * half;
    std::vector<double> base(C * S * S, 0.0);
    for (std::size_t i = 0; i < half; ++i) {
      for (std::size_t j = 0; j < half; ++j) {
        if (!in_shape(family, i, j, half)) continue;
        for (std::size_t ch = 0; ch < C; ++ch) base[(ch * S + oi + i) * S + oj + j] = color[ch];
      }
    }
    for (std::size_t k = 0; k < cfg.per_class; ++k) {
      std::vector<double> img(base);
      if (cfg.jitter > 0) {
        const double g = 1.0 + cfg.jitter * gain(noise_rng);
        for (double& v : img) v = v * g + cfg.jitter * noise(noise_rng);
      }
      for (double& v : img) v = static_cast<float>(v);
      pool.images.push_back(std::move(img));
      pool.labels.push_back(cls);
    }
  }
  for (std::size_t c = 0; c < combos.size(); ++c) {
    if (c < cfg.train_classes) pool.train_classes.push_back(c);
    else if (c < cfg.train_classes + cfg.val_classes) pool.val_classes.push_back(c);
    else pool.test_classes.push_back(c);
  }
  return pool;
}

Episode sample_episode(const FewshotPool& pool, const std::vector<std::size_t>& classes, const EpisodeConfig& cfg,
                       std::uint64_t seed) {
  if (cfg.ways == 0 || cfg.shots == 0) throw ConfigError("episodes need at least one way and one shot");
  if (cfg.ways > classes.size()) {
    throw ConfigError("episode asks for " + std::to_string(cfg.ways) + " classes, split has " +
                      std::to_string(classes.size()));
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> pick(classes);
  std::shuffle(pick.begin(), pick.end(), rng);
  pick.resize(cfg.ways);
  Episode e;
  e.classes = pick;
  for (std::size_t m = 0; m < pick.size(); ++m) {
    auto members = pool.members(pick[m]);
    if (members.size() < cfg.shots + cfg.queries) {
      throw ConfigError("class " + std::to_string(pick[m]) + " has " + std::to_string(members.size()) +
                        " samples, episode needs " + std::to_string(cfg.shots + cfg.queries));
    }
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t k = 0; k < cfg.shots; ++k) {
      e.support.push_back(members[k]);
      e.support_labels.push_back(m);
    }
    for (std::size_t k = 0; k < cfg.queries; ++k) {
      e.query.push_back(members[cfg.shots + k]);
      e.query_labels.push_back(m);
    }
  }
  return e;
}

Tensor stack_images(const FewshotPool& pool, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ShapeError("stack_images: no samples");
  const std::size_t S = pool.config.image_size, C = pool.config.channels;
  std::vector<double> d;
  d.reserve(indices.size() * C * S * S);
  for (std::size_t i : indices) {
    const auto& img = pool.images.at(i);
    d.insert(d.end(), img.begin(), img.end());
  }
  return Tensor({indices.size(), C, S, S}, std::move(d));
}

}  // namespace normlab
