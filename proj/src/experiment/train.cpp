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
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <memory>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>

#include "normlab/autograd.hpp"
#include "normlab/experiment.hpp"
#include "normlab/ops.hpp"
#include "normlab/optim.hpp"

namespace normlab {

namespace {

// Stream tags for mix_seed.
constexpr std::uint64_t kInitStream = 100;
constexpr std::uint64_t kBatchStream = 101;
constexpr std::uint64_t kEpisodeStream = 102;

std::unique_ptr<Optimizer> make_optimizer(const ExperimentConfig& cfg, NamedTensors params) {
  if (cfg.optimizer == "sgd") return std::make_unique<Sgd>(std::move(params), SgdOptions{cfg.lr, cfg.momentum});
  return std::make_unique<Adam>(std::move(params), AdamOptions{cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps});
}

bool needs_calibration(const Model& model) {
  for (const auto& [name, t] : model.buffers()) {
    if (name.ends_with("running_count") && t.item() == 0.0) return true;
  }
  return false;
}

// Epoch-wise shuffled minibatch indices.
class BatchStream {
 public:
  BatchStream(std::size_t n, std::size_t batch, std::uint64_t seed) : order_(n), batch_(std::min(batch, n)), rng_(seed) {
    std::iota(order_.begin(), order_.end(), 0);
    pos_ = n;
  }
  std::vector<std::size_t> next() {
    if (pos_ + batch_ > order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
    }
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_));
    pos_ += batch_;
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t pos_ = 0;
  std::mt19937_64 rng_;
};

// One optimization step or one statistics pass for a task.
class Trainer {
 public:
  Trainer(const ExperimentConfig& cfg, const TaskData& data, std::uint64_t seed)
      : cfg_(cfg), data_(data), seed_(seed) {
    if (cfg.task == Task::Sqoop) {
      if (!data.sqoop) throw ConfigError("sqoop training needs sqoop data");
      if (data.sqoop->train.empty()) throw ConfigError("sqoop training split is empty");
      batches_.emplace(data.sqoop->train.size(), cfg.batch_size, mix_seed(seed, kBatchStream));
    } else if (!data.pool) {
      throw ConfigError("few-shot training needs a few-shot pool");
    }
  }

  Tensor loss(Model& model, std::size_t step) {
    if (cfg_.task == Task::Sqoop) {
      const SqoopBatch b = make_batch(data_.sqoop->train, batches_->next(), data_.sqoop->config);
      return softmax_xent(model.film().forward(b.images, b.questions), b.labels);
    }
    const auto& pool = *data_.pool;
    const EpisodeConfig ec = cfg_.episodes();
    const Episode e = sample_episode(pool, pool.train_classes, ec, mix_seed(mix_seed(seed_, kEpisodeStream), step));
    const auto out = model.proto().forward(stack_images(pool, e.support), e.support_labels, ec.ways,
                                           stack_images(pool, e.query));
    return softmax_xent(out.logits, e.query_labels);
  }

  // Fills empty running statistics with one train-mode pass that does not
  // touch the parameters.
  void calibrate(Model& model) {
    if (!needs_calibration(model)) return;
    NoGradGuard guard;
    model.set_mode(NormMode::Train);
    if (cfg_.task == Task::Sqoop) {
      BatchStream first(data_.sqoop->train.size(), cfg_.batch_size, mix_seed(seed_, kBatchStream));
      const SqoopBatch b = make_batch(data_.sqoop->train, first.next(), data_.sqoop->config);
      model.film().forward(b.images, b.questions);
    } else {
      const auto& pool = *data_.pool;
      const EpisodeConfig ec = cfg_.episodes();
      const Episode e = sample_episode(pool, pool.train_classes, ec, mix_seed(mix_seed(seed_, kEpisodeStream), 0));
      model.proto().forward(stack_images(pool, e.support), e.support_labels, ec.ways, stack_images(pool, e.query));
    }
  }

 private:
  const ExperimentConfig& cfg_;
  const TaskData& data_;
  std::uint64_t seed_;
  std::optional<BatchStream> batches_;
};

std::ofstream open_metrics(const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot write " + path.string());
  f << kMetricsHeader << "\n" << std::flush;
  return f;
}

std::vector<std::string> data_lines(const std::filesystem::path& path) {
  std::ifstream f(path);
  std::vector<std::string> out;
  std::string line;
  std::getline(f, line);
  while (std::getline(f, line)) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

nlohmann::json to_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}, {"n", m.n}}; }

}  // namespace

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd m;
  m.n = values.size();
  if (m.n == 0) return m;
  m.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(m.n);
  if (m.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - m.mean) * (v - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(m.n - 1));
  }
  return m;
}

bool TrainReport::all_failed() const {
  return std::all_of(seeds.begin(), seeds.end(), [](const SeedOutcome& s) { return s.failed; });
}

SeedOutcome train_seed(const ExperimentConfig& cfg, const TaskData& data, std::uint64_t seed,
                       const std::filesystem::path& dir, const TrainOptions& opts) {
  cfg.validate();
  std::filesystem::create_directories(dir);
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return cfg.record_wall_time ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() : 0.0;
  };
  auto log = [&](const std::string& msg) {
    if (opts.log) opts.log("seed " + std::to_string(seed) + ": " + msg);
  };

  std::ofstream metrics = open_metrics(dir / "metrics.csv");
  auto write_row = [&](std::size_t step, const std::string& split, const EvalResult& r) {
    metrics << to_csv({cfg.run_id, seed, step, split, r.loss, r.accuracy, elapsed()}) << "\n" << std::flush;
  };

  SeedOutcome out;
  out.seed = seed;
  Model model(cfg, mix_seed(seed, kInitStream));
  Trainer trainer(cfg, data, seed);
  auto optimizer = make_optimizer(cfg, model.parameters());
  std::vector<std::vector<double>> best;
  double best_val = -1.0;
  std::size_t since_best = 0;

  // Returns true when training should stop.
  auto evaluate_at = [&](std::size_t step) {
    const EvalResult tr = evaluate_model(model, cfg, data, "train", cfg.train_eval_samples);
    const EvalResult va = evaluate_model(model, cfg, data, "validation", 0);
    model.set_mode(NormMode::Train);
    if (!std::isfinite(tr.loss) || !std::isfinite(va.loss)) throw NumericalError("non-finite evaluation loss");
    write_row(step, "train", tr);
    write_row(step, "validation", va);
    log("step " + std::to_string(step) + " train_acc " + std::to_string(tr.accuracy) + " val_acc " +
        std::to_string(va.accuracy));
    if (va.accuracy > best_val) {
      best_val = va.accuracy;
      best = model.snapshot();
      out.best_step = step;
      out.best_val_accuracy = va.accuracy;
      out.train_accuracy = tr.accuracy;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (cfg.target_accuracy > 0 && tr.accuracy >= cfg.target_accuracy) return true;
    return cfg.patience > 0 && since_best >= cfg.patience;
  };

  try {
    trainer.calibrate(model);
    bool stop = evaluate_at(0);
    for (std::size_t step = 1; step <= cfg.max_updates && !stop; ++step) {
      model.set_mode(NormMode::Train);
      optimizer->zero_grad();
      const Tensor loss = trainer.loss(model, step);
      if (!std::isfinite(loss.item())) throw NumericalError("non-finite training loss at step " + std::to_string(step));
      backward(loss);
      optimizer->step();
      out.updates = step;
      if (step % cfg.eval_interval == 0 || step == cfg.max_updates) stop = evaluate_at(step);
    }
  } catch (const NumericalError& e) {
    Tape::current().clear();
    out.failed = true;
    out.failure = e.what();
    out.wall_time_s = elapsed();
    log(std::string("diverged: ") + e.what());
    return out;
  }

  model.restore(best);
  save_checkpoint(dir / "checkpoint", cfg, seed, out.best_step, model);
  const EvalResult te = evaluate_model(model, cfg, data, "test", 0);
  write_row(out.best_step, "test", te);
  out.test_loss = te.loss;
  out.test_accuracy = te.accuracy;
  out.wall_time_s = elapsed();
  log("done: best_step " + std::to_string(out.best_step) + " test_acc " + std::to_string(te.accuracy));
  return out;
}

TrainReport train(const ExperimentConfig& cfg, const std::filesystem::path& out, const TrainOptions& opts) {
  cfg.validate();
  std::filesystem::create_directories(out);
  const TaskData data = load_task_data(cfg);

  TrainReport report;
  report.seeds.resize(cfg.seeds.size());
  std::vector<std::exception_ptr> errors(cfg.seeds.size());
  std::mutex log_mutex;
  TrainOptions seed_opts = opts;
  if (opts.log) {
    seed_opts.log = [&](const std::string& msg) {
      std::lock_guard lock(log_mutex);
      opts.log(msg);
    };
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cfg.seeds.size(); i = next++) {
      try {
        report.seeds[i] = train_seed(cfg, data, cfg.seeds[i], out / ("seed_" + std::to_string(cfg.seeds[i])), seed_opts);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(opts.threads, 1, cfg.seeds.size());
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  {
    std::ofstream m(out / "metrics.csv", std::ios::trunc);
    m << kMetricsHeader << "\n";
    for (std::uint64_t s : cfg.seeds) {
      for (const auto& line : data_lines(out / ("seed_" + std::to_string(s)) / "metrics.csv")) m << line << "\n";
    }
    if (!m) throw Error("failed writing " + (out / "metrics.csv").string());
  }

  std::vector<double> test_acc, train_acc;
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& s : report.seeds) {
    if (!s.failed) {
      test_acc.push_back(s.test_accuracy);
      train_acc.push_back(s.train_accuracy);
    }
    seeds.push_back({{"seed", s.seed},
                     {"failed", s.failed},
                     {"failure", s.failure},
                     {"updates", s.updates},
                     {"best_step", s.best_step},
                     {"best_val_accuracy", s.best_val_accuracy},
                     {"train_accuracy", s.train_accuracy},
                     {"test_loss", s.test_loss},
                     {"test_accuracy", s.test_accuracy},
                     {"wall_time_s", s.wall_time_s}});
  }
  report.test_accuracy = mean_std(test_acc);
  report.train_accuracy = mean_std(train_acc);
  {
    const nlohmann::json summary = {{"run_id", cfg.run_id},
                                    {"config_hash", config_hash(cfg)},
                                    {"config", cfg.to_json()},
                                    {"test_accuracy", to_json(report.test_accuracy)},
                                    {"train_accuracy", to_json(report.train_accuracy)},
                                    {"seeds", seeds}};
    std::ofstream f(out / "summary.json", std::ios::trunc);
    f << summary.dump(2) << "\n";
    if (!f) throw Error("failed writing " + (out / "summary.json").string());
  }

  if (opts.emit_plotdata) {
    std::ofstream f(out / "plotdata.csv", std::ios::trunc);
    f << "run_id,norm_variant,seed,step,split,accuracy\n";
    for (const auto& r : read_metrics(out / "metrics.csv")) {
      f << r.run_id << "," << to_string(cfg.norm_variant) << "," << r.seed << "," << r.step << "," << r.split << ","
        << r.accuracy << "\n";
    }
    if (!f) throw Error("failed writing " + (out / "plotdata.csv").string());
  }
  return report;
}

}  // namespace normlab
