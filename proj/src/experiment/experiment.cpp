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
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include "normlab/autograd.hpp"
#include "normlab/experiment.hpp"
#include "normlab/ops.hpp"

namespace normlab {

namespace {

constexpr const char* kCheckpointFormat = "normlab-checkpoint-1";

std::string fmt(const char* spec, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

nlohmann::json read_json_file(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw Error("cannot read " + p.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed JSON in " + p.string() + ": " + e.what());
  }
}

double mean_xent(const Tensor& logits, std::span<const std::size_t> labels) {
  return softmax_xent(logits, labels).item();
}

std::size_t count_correct(const Tensor& logits, std::span<const std::size_t> labels) {
  const auto pred = argmax_rows(logits);
  std::size_t n = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) n += pred[i] == labels[i];
  return n;
}

}  // namespace

// ---- metrics -------------------------------------------------------------------

std::string to_csv(const MetricsRow& r) {
  return r.run_id + "," + std::to_string(r.seed) + "," + std::to_string(r.step) + "," + r.split + "," +
         fmt("%.17g", r.loss) + "," + fmt("%.17g", r.accuracy) + "," + fmt("%.3f", r.wall_time_s);
}

std::vector<MetricsRow> read_metrics(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read " + path.string());
  std::string line;
  if (!std::getline(f, line) || line != kMetricsHeader) {
    throw Error(path.string() + ": expected header '" + std::string(kMetricsHeader) + "'");
  }
  std::vector<MetricsRow> rows;
  std::set<std::tuple<std::string, std::uint64_t, std::size_t, std::string>> seen;
  std::size_t n = 1;
  while (std::getline(f, line)) {
    ++n;
    if (line.empty()) continue;
    const auto fields = split_csv(line);
    const std::string where = path.string() + ":" + std::to_string(n);
    if (fields.size() != 7) throw Error(where + ": expected 7 fields, found " + std::to_string(fields.size()));
    MetricsRow r;
    try {
      r.run_id = fields[0];
      r.seed = std::stoull(fields[1]);
      r.step = std::stoull(fields[2]);
      r.split = fields[3];
      r.loss = std::stod(fields[4]);
      r.accuracy = std::stod(fields[5]);
      r.wall_time_s = std::stod(fields[6]);
    } catch (const std::exception&) {
      throw Error(where + ": malformed number");
    }
    if (!seen.emplace(r.run_id, r.seed, r.step, r.split).second) {
      throw Error(where + ": duplicate row for (run_id, seed, step, split)");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---- data and models -------------------------------------------------------------

TaskData load_task_data(const ExperimentConfig& cfg) {
  TaskData d;
  if (cfg.task == Task::Sqoop) {
    d.sqoop = cfg.dataset.empty() ? gen_sqoop(cfg.sqoop()) : read_sqoop(cfg.dataset);
  } else {
    d.pool = cfg.dataset.empty() ? gen_fewshot_universe(cfg.fewshot()) : read_fewshot(cfg.dataset);
  }
  return d;
}

Model::Model(const ExperimentConfig& cfg, std::uint64_t seed) : task_(cfg.task) {
  if (task_ == Task::Sqoop) film_.emplace(cfg.film(), seed);
  else proto_.emplace(cfg.proto(), seed);
}

void Model::set_mode(NormMode mode) {
  if (film_) film_->set_mode(mode);
  else proto_->set_mode(mode);
}

NamedTensors Model::parameters() const { return film_ ? film_->parameters() : proto_->parameters(); }
NamedTensors Model::buffers() const { return film_ ? film_->buffers() : proto_->buffers(); }

std::vector<std::vector<double>> Model::snapshot() const {
  std::vector<std::vector<double>> out;
  for (const auto& [name, t] : parameters()) out.emplace_back(t.data().begin(), t.data().end());
  for (const auto& [name, t] : buffers()) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

void Model::restore(const std::vector<std::vector<double>>& values) {
  NamedTensors all = parameters();
  for (auto& b : buffers()) all.push_back(b);
  if (values.size() != all.size()) throw Error("snapshot does not match the model");
  for (std::size_t i = 0; i < all.size(); ++i) {
    auto dst = all[i].second.mutable_data();
    if (dst.size() != values[i].size()) throw Error("snapshot tensor '" + all[i].first + "' has the wrong size");
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

// ---- evaluation ------------------------------------------------------------------

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows expects [N, K], got " + shape_str(logits.shape()));
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  const auto d = logits.data();
  std::vector<std::size_t> out(N);
  for (std::size_t i = 0; i < N; ++i) {
    const auto row = d.subspan(i * K, K);
    out[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

EvalResult evaluate_sqoop(FilmNetwork& net, const SqoopDataset& ds, const std::string& split, std::size_t limit,
                          std::size_t batch) {
  const auto& samples = ds.split(split);
  const std::size_t n = limit == 0 ? samples.size() : std::min(limit, samples.size());
  if (n == 0) throw ConfigError("split '" + split + "' is empty");
  if (batch == 0) throw ConfigError("evaluation batch must be positive");
  NoGradGuard guard;
  net.set_mode(NormMode::Eval);
  EvalResult r;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < n; start += batch) {
    std::vector<std::size_t> idx(std::min(batch, n - start));
    std::iota(idx.begin(), idx.end(), start);
    const SqoopBatch b = make_batch(samples, idx, ds.config);
    const Tensor logits = net.forward(b.images, b.questions);
    loss_sum += mean_xent(logits, b.labels) * static_cast<double>(idx.size());
    correct += count_correct(logits, b.labels);
  }
  r.count = n;
  r.loss = loss_sum / static_cast<double>(n);
  r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return r;
}

EvalResult evaluate_fewshot(ProtoHead& head, const FewshotPool& pool, const std::string& split,
                            const EpisodeConfig& ec, std::size_t episodes, std::uint64_t seed) {
  if (episodes == 0) throw ConfigError("evaluation needs at least one episode");
  const auto& classes = pool.split(split);
  const std::uint64_t base = mix_seed(seed, fnv1a(split == "val" ? "validation" : split));
  NoGradGuard guard;
  head.set_mode(NormMode::Eval);
  double loss_sum = 0.0;
  std::size_t correct = 0, total = 0;
  for (std::size_t i = 0; i < episodes; ++i) {
    const Episode e = sample_episode(pool, classes, ec, mix_seed(base, i));
    const auto out = head.forward(stack_images(pool, e.support), e.support_labels, ec.ways,
                                  stack_images(pool, e.query));
    loss_sum += mean_xent(out.logits, e.query_labels) * static_cast<double>(e.query.size());
    correct += count_correct(out.logits, e.query_labels);
    total += e.query.size();
  }
  return {loss_sum / static_cast<double>(total), static_cast<double>(correct) / static_cast<double>(total), total};
}

EvalResult evaluate_model(Model& model, const ExperimentConfig& cfg, const TaskData& data, const std::string& split,
                          std::size_t limit) {
  if (model.task() == Task::Sqoop) {
    if (!data.sqoop) throw ConfigError("sqoop model needs sqoop data");
    return evaluate_sqoop(model.film(), *data.sqoop, split, limit);
  }
  if (!data.pool) throw ConfigError("few-shot model needs a few-shot pool");
  std::size_t episodes = split == "test" ? cfg.test_episodes : cfg.eval_episodes;
  if (limit > 0) episodes = std::min(episodes, limit);
  return evaluate_fewshot(model.proto(), *data.pool, split, cfg.episodes(), episodes, mix_seed(cfg.data_seed, 200));
}

// ---- checkpoints -----------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& dir, const ExperimentConfig& cfg, std::uint64_t seed,
                     std::size_t step, const Model& model) {
  std::filesystem::create_directories(dir);
  std::ofstream bin(dir / "params.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw Error("cannot write " + (dir / "params.bin").string());
  nlohmann::json table = nlohmann::json::array();
  std::size_t offset = 0;
  auto write_group = [&](const NamedTensors& group, const char* kind) {
    for (const auto& [name, t] : group) {
      table.push_back({{"name", name}, {"kind", kind}, {"shape", t.shape()}, {"offset", offset}, {"numel", t.numel()}});
      for (double v : t.data()) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        char bytes[8];
        for (int k = 0; k < 8; ++k) bytes[k] = static_cast<char>(bits >> (8 * k));
        bin.write(bytes, 8);
      }
      offset += t.numel();
    }
  };
  write_group(model.parameters(), "param");
  write_group(model.buffers(), "buffer");
  if (!bin) throw Error("failed writing " + (dir / "params.bin").string());
  const nlohmann::json manifest = {{"format", kCheckpointFormat}, {"config", cfg.to_json()},
                                   {"config_hash", config_hash(cfg)}, {"seed", seed},
                                   {"step", step},                   {"tensors", table}};
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << "\n";
  if (!mf) throw Error("failed writing " + (dir / "manifest.json").string());
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir) {
  const auto m = read_json_file(dir / "manifest.json");
  if (m.value("format", "") != kCheckpointFormat) throw Error(dir.string() + " is not a normlab checkpoint");
  CheckpointInfo info;
  info.config = ExperimentConfig::from_json(m.at("config"));
  info.seed = m.at("seed").get<std::uint64_t>();
  info.step = m.at("step").get<std::size_t>();
  info.hash = m.at("config_hash").get<std::string>();
  if (info.hash != config_hash(info.config)) throw Error("checkpoint config hash mismatch in " + dir.string());
  return info;
}

Model load_checkpoint(const std::filesystem::path& dir) {
  const CheckpointInfo info = read_checkpoint_info(dir);
  const auto table = read_json_file(dir / "manifest.json").at("tensors");
  Model model(info.config, info.seed);
  NamedTensors all = model.parameters();
  for (auto& b : model.buffers()) all.push_back(b);
  if (table.size() != all.size()) throw Error("checkpoint tensor count does not match the model");

  std::ifstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw Error("cannot read " + (dir / "params.bin").string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto& e = table[i];
    auto& [name, t] = all[i];
    if (e.at("name").get<std::string>() != name || e.at("shape").get<Shape>() != t.shape()) {
      throw Error("checkpoint tensor '" + e.at("name").get<std::string>() + "' does not match model tensor '" + name +
                  "' " + shape_str(t.shape()));
    }
    const std::size_t off = e.at("offset").get<std::size_t>(), numel = e.at("numel").get<std::size_t>();
    if ((off + numel) * 8 > bytes.size()) throw Error("params.bin is truncated");
    auto dst = t.mutable_data();
    for (std::size_t k = 0; k < numel; ++k) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[(off + k) * 8 + b])) << (8 * b);
      }
      dst[k] = std::bit_cast<double>(bits);
    }
  }
  return model;
}

// ---- dataset generation ------------------------------------------------------------

nlohmann::json gen_data(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  cfg.validate();
  if (cfg.task == Task::Sqoop) write_sqoop(gen_sqoop(cfg.sqoop()), out);
  else write_fewshot(gen_fewshot_universe(cfg.fewshot()), out);
  return read_json_file(out / "manifest.json");
}

}  // namespace normlab
