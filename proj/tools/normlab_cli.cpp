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
#include <cstdlib>
#include <iostream>
#include <optional>
#include <thread>

#include "CLI11.hpp"
#include "normlab/experiment.hpp"
#include "normlab/gradcheck_suite.hpp"

namespace {

using namespace normlab;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitDiverged = 2;
constexpr int kExitGradcheck = 3;

struct Common {
  std::string config;
  std::string out;
  std::string seeds;
  std::string norm_variant;
  std::optional<std::size_t> groups;
};

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (item.empty() || used != item.size()) throw ConfigError("--seed expects integers like 0,1,2; got '" + text + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("--seed needs at least one seed");
  return out;
}

void apply_common(ExperimentConfig& cfg, const Common& c) {
  if (!c.seeds.empty()) cfg.seeds = parse_seeds(c.seeds);
  if (!c.norm_variant.empty()) cfg.norm_variant = norm_variant_from_string(c.norm_variant);
  if (c.groups) cfg.groups = *c.groups;
}

std::size_t thread_budget() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("NORMLAB_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v < 1) throw ConfigError("");
      n = std::min<std::size_t>(n, static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError(std::string("NORMLAB_THREADS must be a positive integer, got '") + env + "'");
    }
  }
  return n;
}

void add_common(CLI::App* cmd, Common& c, bool config_required) {
  auto* opt = cmd->add_option("--config", c.config, "Experiment config (flat JSON)");
  if (config_required) opt->required();
  cmd->add_option("--seed", c.seeds, "Comma-separated seeds, e.g. 0,1,2");
  cmd->add_option("--norm-variant", c.norm_variant, "all_gn | gn_bn_stem | gn_bn_stem_noclf | all_bn");
  cmd->add_option("--groups", c.groups, "Groups of every Group-domain layer");
}

int run_gen_data(const Common& c, const std::string& kind) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig::defaults(task_from_string(kind.empty() ? "sqoop" : kind))
                                          : load_config(c.config);
  if (!kind.empty() && task_from_string(kind) != cfg.task) {
    throw ConfigError("--kind " + kind + " disagrees with the config's task " + to_string(cfg.task));
  }
  if (!c.seeds.empty()) {
    const auto seeds = parse_seeds(c.seeds);
    if (seeds.size() != 1) throw ConfigError("gen-data takes a single --seed");
    cfg.data_seed = seeds.front();
  }
  if (!c.norm_variant.empty()) cfg.norm_variant = norm_variant_from_string(c.norm_variant);
  if (c.groups) cfg.groups = *c.groups;
  const auto manifest = gen_data(cfg, c.out);
  std::cout << manifest.dump(2) << "\n";
  return kExitOk;
}

int run_train(const Common& c, const std::string& dataset, bool emit_plotdata, bool quiet) {
  ExperimentConfig cfg = load_config(c.config);
  apply_common(cfg, c);
  if (!dataset.empty()) cfg.dataset = dataset;
  cfg.validate();
  TrainOptions opts;
  opts.emit_plotdata = emit_plotdata;
  opts.threads = thread_budget();
  if (!quiet) opts.log = [](const std::string& line) { std::cerr << line << std::endl; };
  const TrainReport r = train(cfg, c.out, opts);
  for (const auto& s : r.seeds) {
    if (s.failed) std::cerr << "seed " << s.seed << " failed: " << s.failure << "\n";
  }
  std::cout << "test_accuracy mean=" << r.test_accuracy.mean << " std=" << r.test_accuracy.std
            << " n=" << r.test_accuracy.n << "\n";
  return r.all_failed() ? kExitDiverged : kExitOk;
}

int run_evaluate(const std::string& checkpoint, const std::string& split, const std::string& dataset,
                 std::size_t limit) {
  const CheckpointInfo info = read_checkpoint_info(checkpoint);
  ExperimentConfig cfg = info.config;
  if (!dataset.empty()) cfg.dataset = dataset;
  Model model = load_checkpoint(checkpoint);
  const TaskData data = load_task_data(cfg);
  const EvalResult r = evaluate_model(model, cfg, data, split, limit);
  std::cout << kMetricsHeader << "\n"
            << to_csv({cfg.run_id, info.seed, info.step, split, r.loss, r.accuracy, 0.0}) << "\n";
  return kExitOk;
}

int run_gradcheck_cmd(const std::string& scope, const std::string& fault, double tolerance) {
  const GradcheckReport r = run_gradcheck(scope, tolerance, fault);
  std::cout << r.format();
  return r.passed() ? kExitOk : kExitGradcheck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"normlab: normalization-layer experiments"};
  app.require_subcommand(1);

  Common gen_c;
  std::string kind;
  auto* gen = app.add_subcommand("gen-data", "Write a dataset and its manifest");
  add_common(gen, gen_c, false);
  gen->add_option("--out", gen_c.out, "Output directory")->required();
  gen->add_option("--kind", kind, "sqoop | fewshot")->check(CLI::IsMember({"sqoop", "fewshot"}));

  Common train_c;
  std::string dataset;
  bool emit_plotdata = false, quiet = false;
  auto* tr = app.add_subcommand("train", "Train every seed of a config");
  add_common(tr, train_c, true);
  tr->add_option("--out", train_c.out, "Run directory")->required();
  tr->add_option("--dataset", dataset, "Directory written by gen-data");
  tr->add_flag("--emit-plotdata", emit_plotdata, "Also write plotdata.csv with accuracy curves");
  tr->add_flag("--quiet", quiet, "No progress lines on stderr");

  std::string checkpoint, split = "test", eval_dataset;
  std::size_t limit = 0;
  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on a split");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  ev->add_option("--split", split, "train | validation | test");
  ev->add_option("--dataset", eval_dataset, "Directory written by gen-data");
  ev->add_option("--limit", limit, "Leading samples (sqoop) or episodes (fewshot); 0 = configured size");

  std::string scope = "all", fault;
  double tolerance = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suites");
  gc->add_option("--scope", scope, "all | ops | norm | models")
      ->check(CLI::IsMember({"all", "ops", "norm", "models"}));
  gc->add_option("--inject-fault", fault, "Flip the sign of one op's backward rule");
  gc->add_option("--tolerance", tolerance, "Maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return run_gen_data(gen_c, kind);
    if (*tr) return run_train(train_c, dataset, emit_plotdata, quiet);
    if (*ev) return run_evaluate(checkpoint, split, eval_dataset, limit);
    if (*gc) return run_gradcheck_cmd(scope, fault, tolerance);
  } catch (const normlab::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
