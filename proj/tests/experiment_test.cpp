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
#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "normlab/autograd.hpp"
#include "normlab/experiment.hpp"
#include "normlab/gradcheck_suite.hpp"
#include "normlab/ops.hpp"

using namespace normlab;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = fs::temp_directory_path() / ("normlab_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& p) const { return path_ / p; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig tiny_sqoop() {
  auto cfg = ExperimentConfig::from_json({{"alphabet", 3},
                                          {"rhs_per_lhs", 1},
                                          {"train_size", 160},
                                          {"val_size", 80},
                                          {"test_size", 120},
                                          {"max_updates", 30},
                                          {"eval_interval", 10},
                                          {"train_eval_samples", 64},
                                          {"batch_size", 16},
                                          {"stem_channels", 8},
                                          {"block_channels", 8},
                                          {"classifier_channels", 8},
                                          {"fc_hidden", 8},
                                          {"num_blocks", 1},
                                          {"embed_dim", 8},
                                          {"gru_hidden", 8},
                                          {"seeds", {0, 1}}});
  cfg.validate();
  return cfg;
}

ExperimentConfig tiny_fewshot() {
  auto cfg = ExperimentConfig::from_json({{"task", "fewshot"},
                                          {"train_classes", 6},
                                          {"val_classes", 3},
                                          {"test_classes", 3},
                                          {"per_class", 8},
                                          {"image_size", 8},
                                          {"ways", 3},
                                          {"shots", 2},
                                          {"queries", 2},
                                          {"eval_episodes", 4},
                                          {"test_episodes", 6},
                                          {"max_updates", 6},
                                          {"eval_interval", 3},
                                          {"stem_channels", 4},
                                          {"block_channels", 4},
                                          {"embed_dim", 8},
                                          {"task_dim", 4},
                                          {"groups", 2},
                                          {"seeds", {5}}});
  cfg.validate();
  return cfg;
}

const MetricsRow& find_row(const std::vector<MetricsRow>& rows, std::uint64_t seed, std::size_t step,
                           const std::string& split) {
  for (const auto& r : rows) {
    if (r.seed == seed && r.step == step && r.split == split) return r;
  }
  throw std::runtime_error("row not found");
}

}  // namespace

// ---- config -------------------------------------------------------------------

TEST(Config, TaskDefaultsDiffer) {
  const auto s = ExperimentConfig::defaults(Task::Sqoop);
  const auto f = ExperimentConfig::defaults(Task::Fewshot);
  EXPECT_EQ(s.norm_variant, NormVariant::AllBN);
  EXPECT_EQ(f.norm_variant, NormVariant::AllGN);
  EXPECT_EQ(f.max_updates, 5000u);
  EXPECT_NO_THROW(s.validate());
  EXPECT_NO_THROW(f.validate());
}

TEST(Config, UnknownKeysAndTypeErrorsNameTheKey) {
  try {
    ExperimentConfig::from_json({{"learning_rate", 0.1}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }
  try {
    ExperimentConfig::from_json({{"batch_size", "big"}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("batch_size"), std::string::npos);
  }
  EXPECT_THROW(ExperimentConfig::from_json({{"task", "imagenet"}}), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json({{"norm_variant", "all_ln"}}), ConfigError);
}

TEST(Config, ValidationRejectsBadValues) {
  auto bad = [](nlohmann::json j) {
    auto cfg = ExperimentConfig::from_json(j);
    EXPECT_THROW(cfg.validate(), ConfigError) << j.dump();
  };
  bad({{"groups", 3}});
  bad({{"lr", 0.0}});
  bad({{"seeds", nlohmann::json::array()}});
  bad({{"seeds", {1, 1}}});
  bad({{"run_id", "a,b"}});
  bad({{"alphabet", 3}, {"rhs_per_lhs", 3}});
  bad({{"stem_patch", 4}});
  bad({{"task", "fewshot"}, {"task_dim", 3}});
  bad({{"dataset", "/nonexistent/normlab"}});
}

TEST(Config, JsonRoundTripAndStableHash) {
  auto cfg = tiny_sqoop();
  auto back = ExperimentConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.to_json(), cfg.to_json());
  EXPECT_EQ(config_hash(back), config_hash(cfg));
  EXPECT_EQ(config_hash(cfg).size(), 16u);
  back.lr = 2e-3;
  EXPECT_NE(config_hash(back), config_hash(cfg));
}

TEST(Config, Fnv1aKnownVectors) {
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cull);
  EXPECT_EQ(fnv1a("foobar"), 0x85944171f73967e8ull);
}

// ---- metrics ------------------------------------------------------------------

TEST(Metrics, CsvRoundTripIsExact) {
  TempDir dir("metrics");
  MetricsRow r{"run", 3, 40, "validation", 0.1 + 0.2, 2.0 / 3.0, 1.5};
  {
    std::ofstream out(dir / "m.csv");
    out << kMetricsHeader << "\n" << to_csv(r) << "\n";
  }
  auto rows = read_metrics(dir / "m.csv");
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].loss, r.loss);
  EXPECT_EQ(rows[0].accuracy, r.accuracy);
  EXPECT_EQ(rows[0].step, 40u);
  EXPECT_EQ(rows[0].split, "validation");
}

TEST(Metrics, MalformedFilesAreRejected) {
  TempDir dir("badmetrics");
  auto write = [&](const std::string& text) {
    std::ofstream(dir / "m.csv") << text;
    return dir / "m.csv";
  };
  const std::string row = to_csv({"run", 0, 0, "train", 0.5, 0.5, 0.0});
  EXPECT_THROW(read_metrics(write("seed,step\n" + row + "\n")), Error);
  EXPECT_THROW(read_metrics(write(std::string(kMetricsHeader) + "\nrun,0,0,train,0.5\n")), Error);
  EXPECT_THROW(read_metrics(write(std::string(kMetricsHeader) + "\n" + row + "\n" + row + "\n")), Error);
}

TEST(Metrics, MeanStdUsesSampleDeviation) {
  auto s = mean_std({0.5, 0.7, 0.9});
  EXPECT_NEAR(s.mean, 0.7, 1e-15);
  EXPECT_NEAR(s.std, 0.2, 1e-15);
  EXPECT_EQ(s.n, 3u);
  EXPECT_EQ(mean_std({0.4}).std, 0.0);
  EXPECT_EQ(mean_std({}).n, 0u);
}

// ---- evaluation ---------------------------------------------------------------

TEST(Evaluate, ArgmaxTiesGoToLowestIndex) {
  Tensor logits({3, 3}, {1, 1, 0, 0, 2, 2, 5, 1, 5});
  EXPECT_EQ(argmax_rows(logits), (std::vector<std::size_t>{0, 1, 0}));
}

TEST(Evaluate, UntrainedModelIsAtChance) {
  auto cfg = tiny_sqoop();
  cfg.test_size = 400;
  cfg.norm_variant = NormVariant::AllGN;
  const auto data = load_task_data(cfg);
  Model model(cfg, 0);
  auto r = evaluate_model(model, cfg, data, "test", 0);
  EXPECT_EQ(r.count, 400u);
  EXPECT_NEAR(r.accuracy, 0.5, 0.05);

  cfg.norm_variant = NormVariant::AllBN;
  Model bn(cfg, 0);
  EXPECT_THROW(evaluate_model(bn, cfg, data, "test", 0), NumericalError);
}

TEST(Evaluate, GroupVariantIgnoresEvalBatchSize) {
  auto cfg = tiny_sqoop();
  cfg.norm_variant = NormVariant::AllGN;
  const auto data = load_task_data(cfg);
  Model model(cfg, 1);
  auto big = evaluate_sqoop(model.film(), *data.sqoop, "validation", 0, 80);
  auto small = evaluate_sqoop(model.film(), *data.sqoop, "validation", 0, 1);
  EXPECT_EQ(big.accuracy, small.accuracy);
  EXPECT_NEAR(big.loss, small.loss, 1e-12);
}

// ---- training -------------------------------------------------------------------

TEST(Train, RepeatedRunsAreByteIdentical) {
  TempDir dir("replay");
  auto cfg = tiny_sqoop();
  train(cfg, dir / "a");
  train(cfg, dir / "b");
  const std::string a = slurp(dir / "a" / "metrics.csv");
  ASSERT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(dir / "b" / "metrics.csv"));
  EXPECT_EQ(slurp(dir / "a" / "seed_1" / "checkpoint" / "params.bin"),
            slurp(dir / "b" / "seed_1" / "checkpoint" / "params.bin"));
}

TEST(Train, ThreadCountDoesNotChangeResults) {
  TempDir dir("threads");
  auto cfg = tiny_sqoop();
  TrainOptions one, two;
  two.threads = 2;
  train(cfg, dir / "a", one);
  train(cfg, dir / "b", two);
  EXPECT_EQ(slurp(dir / "a" / "metrics.csv"), slurp(dir / "b" / "metrics.csv"));
}

TEST(Train, MetricsScheduleAndEarlyStopping) {
  TempDir dir("schedule");
  auto cfg = tiny_sqoop();
  auto report = train(cfg, dir.path());
  auto rows = read_metrics(dir / "metrics.csv");
  ASSERT_EQ(report.seeds.size(), 2u);
  for (const auto& s : report.seeds) {
    ASSERT_FALSE(s.failed);
    // Evaluations at 0, 10, 20, 30, each with a train and a validation row.
    double best = -1.0;
    std::size_t best_step = 0;
    for (std::size_t step = 0; step <= 30; step += 10) {
      EXPECT_NO_THROW(find_row(rows, s.seed, step, "train"));
      const double v = find_row(rows, s.seed, step, "validation").accuracy;
      if (v > best) {
        best = v;
        best_step = step;
      }
    }
    EXPECT_EQ(s.best_step, best_step);
    EXPECT_EQ(s.best_val_accuracy, best);
    const auto& test = find_row(rows, s.seed, best_step, "test");
    EXPECT_EQ(test.accuracy, s.test_accuracy);
    EXPECT_EQ(s.train_accuracy, find_row(rows, s.seed, best_step, "train").accuracy);
  }
  EXPECT_EQ(report.test_accuracy.n, 2u);
}

TEST(Train, PatienceStopsEarly) {
  TempDir dir("patience");
  auto cfg = tiny_sqoop();
  cfg.seeds = {0};
  cfg.max_updates = 200;
  cfg.eval_interval = 5;
  cfg.patience = 1;
  auto report = train(cfg, dir.path());
  EXPECT_LT(report.seeds[0].updates, 200u);
}

TEST(Train, ZeroUpdatesEvaluatesTheInitialModel) {
  TempDir dir("zero");
  auto cfg = tiny_sqoop();
  cfg.max_updates = 0;
  cfg.test_size = 400;
  cfg.seeds = {4};
  auto report = train(cfg, dir.path());
  EXPECT_EQ(report.seeds[0].updates, 0u);
  EXPECT_EQ(report.seeds[0].best_step, 0u);
  EXPECT_NEAR(report.seeds[0].test_accuracy, 0.5, 0.05);
}

TEST(Train, CheckpointReproducesLoggedMetricsExactly) {
  TempDir dir("ckpt");
  auto cfg = tiny_sqoop();
  auto report = train(cfg, dir.path());
  auto rows = read_metrics(dir / "metrics.csv");
  const auto& s = report.seeds[0];
  const fs::path ckpt = dir / "seed_0" / "checkpoint";
  auto info = read_checkpoint_info(ckpt);
  EXPECT_EQ(info.seed, s.seed);
  EXPECT_EQ(info.step, s.best_step);
  EXPECT_EQ(info.hash, config_hash(cfg));

  Model model = load_checkpoint(ckpt);
  const auto data = load_task_data(info.config);
  auto test = evaluate_model(model, info.config, data, "test", 0);
  EXPECT_EQ(test.accuracy, find_row(rows, s.seed, s.best_step, "test").accuracy);
  EXPECT_EQ(test.loss, find_row(rows, s.seed, s.best_step, "test").loss);
  auto tr = evaluate_model(model, info.config, data, "train", cfg.train_eval_samples);
  EXPECT_EQ(tr.accuracy, find_row(rows, s.seed, s.best_step, "train").accuracy);
  EXPECT_EQ(tr.loss, find_row(rows, s.seed, s.best_step, "train").loss);
}

TEST(Train, CorruptCheckpointsAreRejected) {
  TempDir dir("corrupt");
  auto cfg = tiny_sqoop();
  cfg.seeds = {0};
  cfg.max_updates = 0;
  train(cfg, dir.path());
  const fs::path ckpt = dir / "seed_0" / "checkpoint";
  fs::resize_file(ckpt / "params.bin", fs::file_size(ckpt / "params.bin") - 8);
  EXPECT_THROW(load_checkpoint(ckpt), Error);

  auto manifest = nlohmann::json::parse(slurp(ckpt / "manifest.json"));
  manifest["config"]["lr"] = 0.5;
  std::ofstream(ckpt / "manifest.json") << manifest.dump();
  EXPECT_THROW(read_checkpoint_info(ckpt), Error);
}

TEST(Train, DivergedSeedsAreExcludedFromAggregates) {
  TempDir dir("diverge");
  auto cfg = tiny_sqoop();
  cfg.optimizer = "sgd";
  cfg.lr = 1e150;
  auto report = train(cfg, dir.path());
  EXPECT_TRUE(report.all_failed());
  EXPECT_EQ(report.test_accuracy.n, 0u);
  for (const auto& s : report.seeds) EXPECT_FALSE(s.failure.empty());
  auto summary = nlohmann::json::parse(slurp(dir / "summary.json"));
  EXPECT_EQ(summary["test_accuracy"]["n"], 0);
  EXPECT_TRUE(summary["seeds"][0]["failed"].get<bool>());
}

TEST(Train, PlotdataCarriesVariant) {
  TempDir dir("plot");
  auto cfg = tiny_sqoop();
  cfg.seeds = {0};
  cfg.max_updates = 10;
  TrainOptions opts;
  opts.emit_plotdata = true;
  train(cfg, dir.path(), opts);
  std::ifstream in(dir / "plotdata.csv");
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  EXPECT_EQ(header, "run_id,norm_variant,seed,step,split,accuracy");
  EXPECT_EQ(first.rfind("run,all_bn,0,0,", 0), 0u) << first;
}

TEST(Train, FewshotRunIsDeterministic) {
  TempDir dir("fewshot");
  auto cfg = tiny_fewshot();
  auto a = train(cfg, dir / "a");
  train(cfg, dir / "b");
  ASSERT_FALSE(a.seeds[0].failed);
  EXPECT_EQ(slurp(dir / "a" / "metrics.csv"), slurp(dir / "b" / "metrics.csv"));

  Model model = load_checkpoint(dir / "a" / "seed_5" / "checkpoint");
  const auto data = load_task_data(cfg);
  EXPECT_EQ(evaluate_model(model, cfg, data, "test", 0).accuracy, a.seeds[0].test_accuracy);
}

// ---- datasets -------------------------------------------------------------------

TEST(GenData, ManifestCountsTriples) {
  TempDir dir("gen");
  auto cfg = tiny_sqoop();
  auto m = gen_data(cfg, dir / "ds");
  EXPECT_EQ(m["train_triples"], 12);
  EXPECT_EQ(m["test_triples"], 24);
  EXPECT_EQ(m["splits"]["train"], 160);
  auto again = gen_data(cfg, dir / "ds2");
  for (const char* f : {"manifest.json", "train.jsonl", "validation.jsonl", "test.jsonl"}) {
    EXPECT_EQ(slurp(dir / "ds" / f), slurp(dir / "ds2" / f)) << f;
  }
}

TEST(GenData, DatasetOnDiskMatchesInMemoryGeneration) {
  TempDir dir("gendisk");
  auto cfg = tiny_sqoop();
  cfg.seeds = {0};
  gen_data(cfg, dir / "ds");
  auto from_disk = cfg;
  from_disk.dataset = (dir / "ds").string();
  train(cfg, dir / "mem");
  train(from_disk, dir / "disk");
  EXPECT_EQ(slurp(dir / "mem" / "metrics.csv"), slurp(dir / "disk" / "metrics.csv"));
}

// ---- gradient suite -------------------------------------------------------------

TEST(GradcheckSuite, AllComponentsPassWithFullCoverage) {
  auto r = run_gradcheck("all");
  EXPECT_TRUE(r.passed()) << r.format();
  EXPECT_EQ(r.covered_ops.size(), differentiable_ops().size());
  EXPECT_TRUE(r.uncovered_ops.empty());
  for (const auto& c : r.components) EXPECT_LE(c.worst_rel_error, 1e-4) << c.name;
}

TEST(GradcheckSuite, InjectedFaultIsCaught) {
  auto r = run_gradcheck("all", 1e-4, "relu");
  EXPECT_FALSE(r.passed());
  bool relu_failed = false;
  for (const auto& c : r.components) {
    if (c.name == "relu") relu_failed = !c.passed;
  }
  EXPECT_TRUE(relu_failed);
  // The fault does not leak past the run.
  EXPECT_TRUE(run_gradcheck("ops").passed());
}

TEST(GradcheckSuite, UnknownFaultOrScopeIsRejected) {
  EXPECT_THROW(run_gradcheck("all", 1e-4, "warp"), ConfigError);
  EXPECT_THROW(run_gradcheck("everything"), ConfigError);
}

// ---- command line ----------------------------------------------------------------

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(NORMLAB_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Cli, ExitCodes) {
  TempDir dir("cli");
  auto cfg = tiny_sqoop();
  cfg.seeds = {0};
  std::ofstream(dir / "ok.json") << cfg.to_json().dump();
  auto bad = cfg;
  bad.optimizer = "sgd";
  bad.lr = 1e150;
  std::ofstream(dir / "diverge.json") << bad.to_json().dump();
  std::ofstream(dir / "typo.json") << R"({"alphabett": 3})";
  const std::string d = dir.path().string();

  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("train --config " + d + "/typo.json --out " + d + "/x"), 1);
  EXPECT_EQ(run_cli("train --config " + d + "/missing.json --out " + d + "/x"), 1);
  EXPECT_EQ(run_cli("train --config " + d + "/ok.json --out " + d + "/x --seed 1,a"), 1);
  EXPECT_EQ(run_cli("gen-data --config " + d + "/ok.json --out " + d + "/ds"), 0);
  EXPECT_EQ(run_cli("train --quiet --config " + d + "/ok.json --out " + d + "/run --dataset " + d + "/ds"), 0);
  EXPECT_EQ(run_cli("evaluate --checkpoint " + d + "/run/seed_0/checkpoint"), 0);
  EXPECT_EQ(run_cli("evaluate --checkpoint " + d + "/run/seed_0/checkpoint --split holdout"), 1);
  EXPECT_EQ(run_cli("train --quiet --config " + d + "/diverge.json --out " + d + "/div"), 2);
  EXPECT_EQ(run_cli("gradcheck --scope ops"), 0);
  EXPECT_EQ(run_cli("gradcheck --scope ops --inject-fault sigmoid"), 3);
}
