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

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "normlab/data.hpp"
#include "normlab/film.hpp"
#include "normlab/proto.hpp"

namespace normlab {

enum class Task { Sqoop, Fewshot };

std::string to_string(Task t);
Task task_from_string(const std::string& name);

/// Everything a training run needs, as one flat JSON object. Model and data
/// defaults depend on the task; see ExperimentConfig::defaults.
struct ExperimentConfig {
  Task task = Task::Sqoop;
  std::string run_id = "run";
  NormVariant norm_variant = NormVariant::AllBN;
  std::size_t groups = 4;
  double eps = 1e-5;

  std::string optimizer = "adam";  // adam | sgd
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-5;
  double momentum = 0.9;  // sgd

  std::size_t batch_size = 32;
  std::size_t max_updates = 20000;
  std::size_t eval_interval = 500;
  std::size_t patience = 10;           // evaluations without validation improvement
  double target_accuracy = 0.0;        // > 0: stop once training accuracy reaches it
  std::size_t train_eval_samples = 1000;  // leading train samples scored at each evaluation
  bool record_wall_time = false;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::string dataset;  // existing gen-data output; empty generates in memory

  // SQOOP data
  std::size_t alphabet = 10;
  std::size_t rhs_per_lhs = 1;
  std::size_t grid = 5;
  std::size_t cell = 7;
  std::size_t objects_per_image = 5;
  std::size_t train_size = 20000;
  std::size_t val_size = 2000;
  std::size_t test_size = 4000;
  std::string encoding = "grayscale";
  std::uint64_t data_seed = 0;

  // few-shot data and episodes
  std::size_t train_classes = 24;
  std::size_t val_classes = 8;
  std::size_t test_classes = 8;
  std::size_t per_class = 30;
  std::size_t image_size = 12;
  double jitter = 0.1;
  std::size_t ways = 5;
  std::size_t shots = 5;
  std::size_t queries = 5;
  std::size_t eval_episodes = 100;
  std::size_t test_episodes = 300;

  // model widths
  std::size_t stem_channels = 32;
  std::size_t stem_layers = 1;
  std::size_t stem_patch = 7;
  std::size_t num_blocks = 3;
  std::size_t block_channels = 32;
  std::size_t classifier_channels = 64;
  std::size_t fc_hidden = 64;
  std::size_t embed_dim = 32;
  std::size_t gru_hidden = 64;
  std::size_t task_dim = 16;
  bool coord_maps = true;

  static ExperimentConfig defaults(Task task);
  /// Task defaults overridden by the keys of `j`; unknown keys throw.
  static ExperimentConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  /// Throws ConfigError naming the violated constraint.
  void validate() const;

  SqoopConfig sqoop() const;
  FewshotConfig fewshot() const;
  EpisodeConfig episodes() const { return {ways, shots, queries}; }
  FilmConfig film() const;
  ProtoConfig proto() const;
};

ExperimentConfig load_config(const std::filesystem::path& path);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes);
/// FNV-1a of the compact JSON form of the config, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

// ---- metrics -------------------------------------------------------------------

struct MetricsRow {
  std::string run_id;
  std::uint64_t seed = 0;
  std::size_t step = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
  double wall_time_s = 0.0;
};

inline constexpr const char* kMetricsHeader = "run_id,seed,step,split,loss,accuracy,wall_time_s";

std::string to_csv(const MetricsRow& r);
/// Parses a metrics file, checking the header, the field count and the
/// uniqueness of (run_id, seed, step, split).
std::vector<MetricsRow> read_metrics(const std::filesystem::path& path);

// ---- data and models -------------------------------------------------------------

struct TaskData {
  std::optional<SqoopDataset> sqoop;
  std::optional<FewshotPool> pool;
};

/// Reads `cfg.dataset` when set, otherwise generates the data from the config.
TaskData load_task_data(const ExperimentConfig& cfg);

/// A trainable model of either task.
class Model {
 public:
  Model(const ExperimentConfig& cfg, std::uint64_t seed);

  Task task() const { return task_; }
  FilmNetwork& film() { return *film_; }
  ProtoHead& proto() { return *proto_; }

  void set_mode(NormMode mode);
  NamedTensors parameters() const;
  NamedTensors buffers() const;

  /// Copies of every parameter and buffer value, in declaration order.
  std::vector<std::vector<double>> snapshot() const;
  void restore(const std::vector<std::vector<double>>& values);

 private:
  Task task_;
  std::optional<FilmNetwork> film_;
  std::optional<ProtoHead> proto_;
};

// ---- evaluation ------------------------------------------------------------------

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t count = 0;  // samples (sqoop) or query predictions (fewshot)
};

/// Index of the largest entry of each row; ties go to the lowest index.
std::vector<std::size_t> argmax_rows(const Tensor& logits);

/// Eval-mode scoring of the first `limit` samples (0: all) of a split.
EvalResult evaluate_sqoop(FilmNetwork& net, const SqoopDataset& ds, const std::string& split, std::size_t limit = 0,
                          std::size_t batch = 250);
/// Eval-mode scoring over `episodes` episodes of a class split. Episode i
/// uses a seed derived from (seed, split, i), so results are reproducible.
EvalResult evaluate_fewshot(ProtoHead& head, const FewshotPool& pool, const std::string& split,
                            const EpisodeConfig& ec, std::size_t episodes, std::uint64_t seed);
/// Dispatches on the model's task with the config's evaluation sizes.
EvalResult evaluate_model(Model& model, const ExperimentConfig& cfg, const TaskData& data, const std::string& split,
                          std::size_t limit);

// ---- checkpoints -----------------------------------------------------------------

struct CheckpointInfo {
  ExperimentConfig config;
  std::uint64_t seed = 0;
  std::size_t step = 0;
  std::string hash;
};

/// Writes manifest.json (config, hash, tensor table) and params.bin (raw
/// little-endian doubles) into `dir`.
void save_checkpoint(const std::filesystem::path& dir, const ExperimentConfig& cfg, std::uint64_t seed,
                     std::size_t step, const Model& model);
CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);
/// Rebuilds the model described by the checkpoint and loads its values.
Model load_checkpoint(const std::filesystem::path& dir);

// ---- training --------------------------------------------------------------------

struct SeedOutcome {
  std::uint64_t seed = 0;
  bool failed = false;
  std::string failure;
  std::size_t updates = 0;
  std::size_t best_step = 0;
  double best_val_accuracy = 0.0;
  double train_accuracy = 0.0;  // at best_step
  double test_loss = 0.0;
  double test_accuracy = 0.0;
  double wall_time_s = 0.0;
};

struct TrainOptions {
  bool emit_plotdata = false;
  std::size_t threads = 1;  // concurrent seeds
  std::function<void(const std::string&)> log;  // progress lines; may be empty
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for n < 2
  std::size_t n = 0;
};

MeanStd mean_std(const std::vector<double>& values);

struct TrainReport {
  std::vector<SeedOutcome> seeds;
  MeanStd test_accuracy;
  MeanStd train_accuracy;
  bool all_failed() const;
};

/// Trains one seed. Writes <dir>/metrics.csv (append-only, one row per
/// evaluation) and the best checkpoint to <dir>/checkpoint.
SeedOutcome train_seed(const ExperimentConfig& cfg, const TaskData& data, std::uint64_t seed,
                       const std::filesystem::path& dir, const TrainOptions& opts = {});

/// Trains every seed of the config under <out>/seed_<s>, then writes
/// <out>/metrics.csv, <out>/summary.json and, on request, <out>/plotdata.csv.
TrainReport train(const ExperimentConfig& cfg, const std::filesystem::path& out, const TrainOptions& opts = {});

// ---- dataset generation ------------------------------------------------------------

/// Writes the dataset of the config's task into `out`; returns the manifest.
nlohmann::json gen_data(const ExperimentConfig& cfg, const std::filesystem::path& out);

}  // namespace normlab
