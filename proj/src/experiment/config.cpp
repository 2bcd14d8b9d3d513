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
#include <cstdio>
#include <fstream>
#include <set>

#include "normlab/experiment.hpp"

namespace normlab {

namespace {

// Calls f(key, field) for every config field, in file order.
template <typename Cfg, typename F>
void visit_fields(Cfg& c, F&& f) {
  f("task", c.task);
  f("run_id", c.run_id);
  f("norm_variant", c.norm_variant);
  f("groups", c.groups);
  f("eps", c.eps);
  f("optimizer", c.optimizer);
  f("lr", c.lr);
  f("beta1", c.beta1);
  f("beta2", c.beta2);
  f("adam_eps", c.adam_eps);
  f("momentum", c.momentum);
  f("batch_size", c.batch_size);
  f("max_updates", c.max_updates);
  f("eval_interval", c.eval_interval);
  f("patience", c.patience);
  f("target_accuracy", c.target_accuracy);
  f("train_eval_samples", c.train_eval_samples);
  f("record_wall_time", c.record_wall_time);
  f("seeds", c.seeds);
  f("dataset", c.dataset);
  f("alphabet", c.alphabet);
  f("rhs_per_lhs", c.rhs_per_lhs);
  f("grid", c.grid);
  f("cell", c.cell);
  f("objects_per_image", c.objects_per_image);
  f("train_size", c.train_size);
  f("val_size", c.val_size);
  f("test_size", c.test_size);
  f("encoding", c.encoding);
  f("data_seed", c.data_seed);
  f("train_classes", c.train_classes);
  f("val_classes", c.val_classes);
  f("test_classes", c.test_classes);
  f("per_class", c.per_class);
  f("image_size", c.image_size);
  f("jitter", c.jitter);
  f("ways", c.ways);
  f("shots", c.shots);
  f("queries", c.queries);
  f("eval_episodes", c.eval_episodes);
  f("test_episodes", c.test_episodes);
  f("stem_channels", c.stem_channels);
  f("stem_layers", c.stem_layers);
  f("stem_patch", c.stem_patch);
  f("num_blocks", c.num_blocks);
  f("block_channels", c.block_channels);
  f("classifier_channels", c.classifier_channels);
  f("fc_hidden", c.fc_hidden);
  f("embed_dim", c.embed_dim);
  f("gru_hidden", c.gru_hidden);
  f("task_dim", c.task_dim);
  f("coord_maps", c.coord_maps);
}

nlohmann::json emit(const Task& v) { return to_string(v); }
nlohmann::json emit(const NormVariant& v) { return to_string(v); }
template <typename T>
nlohmann::json emit(const T& v) {
  return v;
}

template <typename T>
void assign(const std::string& key, const nlohmann::json& j, T& out) {
  try {
    if constexpr (std::is_same_v<T, Task>) {
      out = task_from_string(j.get<std::string>());
    } else if constexpr (std::is_same_v<T, NormVariant>) {
      out = norm_variant_from_string(j.get<std::string>());
    } else if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
      if (!j.is_number_integer() || (!j.is_number_unsigned() && j.get<std::int64_t>() < 0)) {
        throw ConfigError("expected a non-negative integer");
      }
      out = j.get<T>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!j.is_number()) throw ConfigError("expected a number");
      out = j.get<double>();
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!j.is_boolean()) throw ConfigError("expected true or false");
      out = j.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!j.is_string()) throw ConfigError("expected a string");
      out = j.get<std::string>();
    } else {
      if (!j.is_array()) throw ConfigError("expected an array of seeds");
      for (const auto& v : j) {
        if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
          throw ConfigError("seeds must be non-negative integers");
        }
      }
      out = j.get<T>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

void require_divides(std::size_t groups, std::size_t width, const char* what) {
  if (width % groups != 0) {
    throw ConfigError("groups=" + std::to_string(groups) + " does not divide " + what + "=" + std::to_string(width));
  }
}

}  // namespace

std::string to_string(Task t) { return t == Task::Sqoop ? "sqoop" : "fewshot"; }

Task task_from_string(const std::string& name) {
  if (name == "sqoop") return Task::Sqoop;
  if (name == "fewshot") return Task::Fewshot;
  throw ConfigError("unknown task '" + name + "' (expected sqoop or fewshot)");
}

ExperimentConfig ExperimentConfig::defaults(Task task) {
  ExperimentConfig c;
  c.task = task;
  if (task == Task::Fewshot) {
    c.norm_variant = NormVariant::AllGN;
    c.max_updates = 5000;
    c.eval_interval = 250;
    c.stem_channels = 16;
    c.stem_layers = 1;
    c.stem_patch = 2;
    c.num_blocks = 2;
    c.block_channels = 16;
    c.embed_dim = 32;
    c.task_dim = 16;
    c.coord_maps = false;
  }
  return c;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  Task task = Task::Sqoop;
  if (j.contains("task")) assign("task", j.at("task"), task);
  ExperimentConfig c = defaults(task);
  std::set<std::string> known;
  visit_fields(c, [&](const char* key, auto& field) {
    known.insert(key);
    if (j.contains(key)) assign(key, j.at(key), field);
  });
  for (const auto& [key, v] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  return c;
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  visit_fields(*this, [&](const char* key, const auto& field) { j[key] = emit(field); });
  return j;
}

void ExperimentConfig::validate() const {
  if (groups == 0) throw ConfigError("groups must be positive");
  require_divides(groups, block_channels, "block_channels");
  if (stem_layers > 1) require_divides(groups, stem_channels, "stem_channels");
  if (task == Task::Sqoop) require_divides(groups, fc_hidden, "fc_hidden");
  if (!(eps > 0)) throw ConfigError("eps must be positive");
  if (optimizer != "adam" && optimizer != "sgd") throw ConfigError("optimizer must be adam or sgd");
  if (!(lr > 0)) throw ConfigError("lr must be positive");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("beta1 and beta2 must be in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (eval_interval == 0) throw ConfigError("eval_interval must be positive");
  if (seeds.empty()) throw ConfigError("seeds must list at least one seed");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("seeds must be distinct");
  }
  if (run_id.empty() || run_id.find_first_of(",\n\"") != std::string::npos) {
    throw ConfigError("run_id must be non-empty and free of commas, quotes and newlines");
  }
  if (stem_patch == 0) throw ConfigError("stem_patch must be positive");
  if (!dataset.empty() && !std::filesystem::exists(std::filesystem::path(dataset) / "manifest.json")) {
    throw ConfigError("dataset path '" + dataset + "' has no manifest.json");
  }
  if (task == Task::Sqoop) {
    sqoop().validate();
    if ((grid * cell) % stem_patch != 0) throw ConfigError("stem_patch must divide the canvas side grid * cell");
  } else {
    fewshot().validate();
    if (image_size % stem_patch != 0) throw ConfigError("stem_patch must divide image_size");
    if (task_dim == 0 || task_dim % 2 != 0) throw ConfigError("task_dim must be positive and even");
    if (ways < 2) throw ConfigError("episodes need at least two ways");
    if (queries == 0) throw ConfigError("queries must be positive");
  }
}

SqoopConfig ExperimentConfig::sqoop() const {
  SqoopConfig s;
  s.alphabet = alphabet;
  s.rhs_per_lhs = rhs_per_lhs;
  s.grid = grid;
  s.cell = cell;
  s.objects_per_image = objects_per_image;
  s.train_size = train_size;
  s.val_size = val_size;
  s.test_size = test_size;
  if (encoding == "grayscale") s.encoding = ImageEncoding::Grayscale;
  else if (encoding == "onehot") s.encoding = ImageEncoding::OneHot;
  else throw ConfigError("encoding must be grayscale or onehot, got '" + encoding + "'");
  s.seed = data_seed;
  return s;
}

FewshotConfig ExperimentConfig::fewshot() const {
  FewshotConfig f;
  f.train_classes = train_classes;
  f.val_classes = val_classes;
  f.test_classes = test_classes;
  f.per_class = per_class;
  f.image_size = image_size;
  f.jitter = jitter;
  f.seed = data_seed;
  return f;
}

FilmConfig ExperimentConfig::film() const {
  const SqoopConfig s = sqoop();
  FilmConfig f;
  f.in_channels = s.channels();
  f.stem_channels = stem_channels;
  f.stem_layers = stem_layers;
  f.stem_patch = stem_patch;
  f.num_blocks = num_blocks;
  f.block_channels = block_channels;
  f.classifier_channels = classifier_channels;
  f.fc_hidden = fc_hidden;
  f.num_answers = 2;
  f.vocab = s.vocab();
  f.embed_dim = embed_dim;
  f.gru_hidden = gru_hidden;
  f.groups = groups;
  f.eps = eps;
  f.coord_maps = coord_maps;
  f.variant = norm_variant;
  return f;
}

ProtoConfig ExperimentConfig::proto() const {
  ProtoConfig p;
  p.in_channels = 3;
  p.stem_channels = stem_channels;
  p.stem_layers = stem_layers;
  p.stem_patch = stem_patch;
  p.num_blocks = num_blocks;
  p.block_channels = block_channels;
  p.embed_dim = embed_dim;
  p.task_dim = task_dim;
  p.groups = groups;
  p.eps = eps;
  p.coord_maps = coord_maps;
  p.domain = variant_layout(norm_variant).blocks;
  return p;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return ExperimentConfig::from_json(j);
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const ExperimentConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(cfg.to_json().dump())));
  return buf;
}

}  // namespace normlab
