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
#include <bit>
#include <fstream>

#include "normlab/data.hpp"

namespace normlab {

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int decode_char(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  return -1;
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::error_code ec;
  std::filesystem::create_directories(p.parent_path(), ec);
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + p.string());
  return f;
}

std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw Error("cannot read " + p.string());
  return f;
}

nlohmann::json read_json(const std::filesystem::path& p) {
  auto f = open_in(p);
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed JSON in " + p.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  auto f = open_out(p);
  f << j.dump(2) << "\n";
  if (!f) throw Error("failed writing " + p.string());
}

template <typename F>
void for_each_line(const std::filesystem::path& p, F&& f) {
  auto in = open_in(p);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      f(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw Error(p.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

constexpr const char* kSplits[] = {"train", "validation", "test"};

}  // namespace

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  const std::size_t rest = bytes.size() - i;
  if (rest > 0) {
    std::uint32_t v = bytes[i] << 16;
    if (rest == 2) v |= bytes[i + 1] << 8;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += rest == 2 ? kAlphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw Error("base64 length is not a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (c == '=' && i + 4 == text.size() && k >= 2) {
        v[k] = 0;
        ++pad;
      } else {
        v[k] = decode_char(c);
        if (v[k] < 0 || pad > 0) throw Error("invalid base64 input");
      }
    }
    const std::uint32_t w = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out.push_back(static_cast<std::uint8_t>(w >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>(w >> 8));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(w));
  }
  return out;
}

std::string encode_pixels(std::span<const double> pixels) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(pixels.size() * 4);
  for (double p : pixels) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(p));
    for (int k = 0; k < 4; ++k) bytes.push_back(static_cast<std::uint8_t>(bits >> (8 * k)));
  }
  return base64_encode(bytes);
}

std::vector<double> decode_pixels(const std::string& text) {
  const auto bytes = base64_decode(text);
  if (bytes.size() % 4 != 0) throw Error("pixel payload is not a whole number of 32-bit values");
  std::vector<double> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(bytes[4 * i + k]) << (8 * k);
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

nlohmann::json sample_to_json(const SqoopSample& s, const SqoopConfig& cfg) {
  nlohmann::json coords = nlohmann::json::array();
  for (const auto& p : s.objects) coords.push_back({p.glyph, p.row, p.col});
  return {{"image", encode_pixels(render_scene(s.objects, cfg))},
          {"shape", {cfg.channels(), cfg.pixels(), cfg.pixels()}},
          {"question", {s.question.x, static_cast<std::size_t>(s.question.r), s.question.y}},
          {"answer", s.answer ? 1 : 0},
          {"coords", coords}};
}

SqoopSample sample_from_json(const nlohmann::json& j) {
  SqoopSample s;
  const auto& q = j.at("question");
  if (q.size() != 3 || q[1].get<std::size_t>() >= kNumRelations) throw Error("malformed question");
  s.question = {q[0].get<std::size_t>(), static_cast<Relation>(q[1].get<std::size_t>()), q[2].get<std::size_t>()};
  s.answer = j.at("answer").get<int>() == 1;
  for (const auto& c : j.at("coords")) {
    s.objects.push_back({c.at(0).get<std::size_t>(), c.at(1).get<std::size_t>(), c.at(2).get<std::size_t>()});
  }
  if (s.objects.size() < 2 || s.objects[0].glyph != s.question.x || s.objects[1].glyph != s.question.y) {
    throw Error("sample coords must start with the question's x and y glyphs");
  }
  return s;
}

void write_sqoop(const SqoopDataset& ds, const std::filesystem::path& dir) {
  nlohmann::json counts;
  for (const char* name : kSplits) {
    auto f = open_out(dir / (std::string(name) + ".jsonl"));
    for (const auto& s : ds.split(name)) f << sample_to_json(s, ds.config).dump() << "\n";
    if (!f) throw Error("failed writing split " + std::string(name));
    counts[name] = ds.split(name).size();
  }
  nlohmann::json partners = rhs_partners(ds.config);
  write_json(dir / "manifest.json", {{"kind", "sqoop"},
                                     {"seed", ds.config.seed},
                                     {"config", to_json(ds.config)},
                                     {"splits", counts},
                                     {"train_triples", ds.train_triples.size()},
                                     {"test_triples", ds.test_triples.size()},
                                     {"rhs_partners", partners}});
}

SqoopDataset read_sqoop(const std::filesystem::path& dir) {
  const auto manifest = read_json(dir / "manifest.json");
  if (manifest.value("kind", "") != "sqoop") throw Error(dir.string() + " does not hold a sqoop dataset");
  SqoopDataset ds;
  ds.config = sqoop_config_from_json(manifest.at("config"));
  ds.config.validate();
  ds.train_triples = train_triples(ds.config);
  ds.test_triples = all_triples(ds.config);
  for (const char* name : kSplits) {
    auto& out = std::string(name) == "train" ? ds.train : std::string(name) == "test" ? ds.test : ds.validation;
    for_each_line(dir / (std::string(name) + ".jsonl"), [&](const nlohmann::json& j) {
      SqoopSample s = sample_from_json(j);
      if (decode_pixels(j.at("image").get<std::string>()) != render_scene(s.objects, ds.config)) {
        throw Error("stored image disagrees with its coords in split " + std::string(name));
      }
      out.push_back(std::move(s));
    });
  }
  return ds;
}

void write_fewshot(const FewshotPool& pool, const std::filesystem::path& dir) {
  const std::size_t S = pool.config.image_size, C = pool.config.channels;
  auto f = open_out(dir / "pool.jsonl");
  for (std::size_t i = 0; i < pool.images.size(); ++i) {
    nlohmann::json j = {{"image", encode_pixels(pool.images[i])}, {"shape", {C, S, S}}, {"label", pool.labels[i]}};
    f << j.dump() << "\n";
  }
  if (!f) throw Error("failed writing pool.jsonl");
  write_json(dir / "manifest.json", {{"kind", "fewshot"},
                                     {"seed", pool.config.seed},
                                     {"config", to_json(pool.config)},
                                     {"samples", pool.images.size()},
                                     {"classes",
                                      {{"train", pool.train_classes},
                                       {"validation", pool.val_classes},
                                       {"test", pool.test_classes}}}});
}

FewshotPool read_fewshot(const std::filesystem::path& dir) {
  const auto manifest = read_json(dir / "manifest.json");
  if (manifest.value("kind", "") != "fewshot") throw Error(dir.string() + " does not hold a few-shot pool");
  FewshotPool pool;
  pool.config = fewshot_config_from_json(manifest.at("config"));
  pool.config.validate();
  const auto& cls = manifest.at("classes");
  pool.train_classes = cls.at("train").get<std::vector<std::size_t>>();
  pool.val_classes = cls.at("validation").get<std::vector<std::size_t>>();
  pool.test_classes = cls.at("test").get<std::vector<std::size_t>>();
  const std::size_t per = pool.config.channels * pool.config.image_size * pool.config.image_size;
  for_each_line(dir / "pool.jsonl", [&](const nlohmann::json& j) {
    auto img = decode_pixels(j.at("image").get<std::string>());
    if (img.size() != per) throw Error("pool image has " + std::to_string(img.size()) + " values");
    pool.images.push_back(std::move(img));
    pool.labels.push_back(j.at("label").get<std::size_t>());
  });
  return pool;
}

}  // namespace normlab
