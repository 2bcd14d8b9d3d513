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

// Acceptance suite: one PASS/FAIL line per criterion.
//
//   normlab_acceptance                 run all ten criteria
//   normlab_acceptance --criterion 7   run one

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "normlab/experiment.hpp"
#include "normlab/gradcheck_suite.hpp"
#include "normlab/ops.hpp"
#include "norm_oracle.hpp"
#include "test_util.hpp"

using namespace normlab;
using namespace normlab::testing;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string title;
  std::function<Verdict(const fs::path& work)> run;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void progress(const std::string& line) { std::cerr << "  " << line << std::endl; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  const std::size_t per = x.numel() / x.dim(0);
  Shape s = x.shape();
  s[0] = count;
  return Tensor(s, std::vector<double>(x.data().begin() + begin * per, x.data().begin() + (begin + count) * per));
}

NormLayer plain_layer(StatDomain d, std::size_t C, double eps = 1e-5) {
  NormLayerOptions o;
  o.domain = d;
  o.channels = C;
  o.affine = AffineKind::None;
  o.eps = eps;
  return NormLayer(o);
}

NormLayer cond_layer(StatDomain d, std::size_t C, std::size_t D, std::mt19937_64* randomize = nullptr) {
  NormLayerOptions o;
  o.domain = d;
  o.channels = C;
  o.affine = AffineKind::Conditional;
  o.cond_dim = D;
  NormLayer layer(o);
  if (randomize) {
    auto& a = std::get<ConditionalAffine>(layer.affine());
    for (Tensor* t : {&a.w_gamma, &a.b_gamma, &a.w_beta, &a.b_beta}) {
      for (auto& v : t->mutable_data()) v = std::uniform_real_distribution<double>(-1, 1)(*randomize);
    }
  }
  return layer;
}

std::vector<StatDomain> domains_for(std::size_t C) {
  std::vector<StatDomain> out = {StatDomain::batch(), StatDomain::layer(), StatDomain::instance()};
  for (std::size_t g = 1; g <= C; ++g) {
    if (C % g == 0) out.push_back(StatDomain::group(g));
  }
  return out;
}

// ---- 1 ----------------------------------------------------------------------------

Verdict statistics_oracle(const fs::path&) {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);
  double worst = 0.0;
  std::size_t tensors = 0;
  bool sizes_ok = true;
  for (std::size_t N = 1; N <= 4; ++N) {
    for (std::size_t C : {2, 4, 8}) {
      for (std::size_t H = 1; H <= 5; ++H) {
        for (std::size_t W = 1; W <= 5; ++W) {
          Tensor x = random_tensor({N, C, H, W}, rng, -3, 3);
          const std::vector<double> xs(x.data().begin(), x.data().end());
          for (const auto& d : domains_for(C)) {
            const auto st = compute_stats(x, d, 1e-5);
            const auto oracle = brute_force_stats(xs, x.shape(), d, 1e-5);
            const std::size_t HW = H * W;
            for (std::size_t i = 0; i < x.numel(); ++i) {
              const std::size_t set = st.partition.plane_set[i / HW];
              worst = std::max(worst, max_rel_diff(std::vector<double>{st.mu[set]}, std::vector<double>{oracle.mu[i]}));
              worst = std::max(worst,
                               max_rel_diff(std::vector<double>{st.sigma[set]}, std::vector<double>{oracle.sigma[i]}));
              sizes_ok = sizes_ok && st.m == oracle.m[i];
            }
            ++tensors;
          }
        }
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-12 && sizes_ok && secs < 30.0,
          fmt("%zu tensor/domain pairs, worst rel error %.2e, set sizes %s, %.1f s", tensors, worst,
              sizes_ok ? "agree" : "DISAGREE", secs)};
}

// ---- 2 ----------------------------------------------------------------------------

Verdict degeneracy(const fs::path&) {
  std::mt19937_64 rng(202);
  std::uniform_int_distribution<std::size_t> small(1, 5), batch(1, 4), pick(0, 2);
  double worst_ln = 0.0, worst_in = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t C = std::array<std::size_t, 3>{2, 4, 8}[pick(rng)];
    Tensor x = random_tensor({batch(rng), C, small(rng), small(rng)}, rng, -4, 4);
    worst_ln = std::max(worst_ln, max_abs_diff(plain_layer(StatDomain::group(1), C).forward(x).data(),
                                               plain_layer(StatDomain::layer(), C).forward(x).data()));
    worst_in = std::max(worst_in, max_abs_diff(plain_layer(StatDomain::group(C), C).forward(x).data(),
                                               plain_layer(StatDomain::instance(), C).forward(x).data()));
  }
  return {worst_ln <= 1e-12 && worst_in <= 1e-12,
          fmt("50 tensors: max |GN(1) - LN| %.2e, max |GN(C) - IN| %.2e", worst_ln, worst_in)};
}

// ---- 3 ----------------------------------------------------------------------------

Verdict gradient_suite(const fs::path&) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = run_gradcheck("all", 1e-4);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : r.components) {
    if (c.worst_rel_error >= worst) {
      worst = c.worst_rel_error;
      worst_name = c.suite + "/" + c.name;
    }
  }
  bool has_film = false, has_proto = false, has_gru = false;
  for (const auto& c : r.components) {
    has_film |= c.suite == "models" && c.name.rfind("film", 0) == 0;
    has_proto |= c.suite == "models" && c.name.rfind("proto", 0) == 0;
    has_gru |= c.suite == "models" && c.name.rfind("gru", 0) == 0;
  }
  const auto fault = run_gradcheck("ops", 1e-4, "tanh");
  const bool pass = r.passed() && r.uncovered_ops.empty() && has_film && has_proto && has_gru && !fault.passed() &&
                    secs < 120.0;
  return {pass, fmt("%zu components, ops covered %zu/%zu, worst %.2e (%s), injected fault %s, %.2f s",
                    r.components.size(), r.covered_ops.size(), differentiable_ops().size(), worst,
                    worst_name.c_str(), fault.passed() ? "MISSED" : "caught", secs)};
}

// ---- 4 ----------------------------------------------------------------------------

double film_batch_gap(FilmNetwork& net, const SqoopBatch& b) {
  Tensor full = net.forward(b.images, b.questions);
  double worst = 0.0;
  for (std::size_t i = 0; i < b.labels.size(); ++i) {
    Tensor one = net.forward(slice_rows(b.images, i, 1), {b.questions[i]});
    worst = std::max(worst, max_abs_diff(one.data(), slice_rows(full, i, 1).data()));
  }
  return worst;
}

Verdict batch_invariance(const fs::path&) {
  NoGradGuard no_grad;
  std::mt19937_64 rng(404);
  double worst_layers = 0.0;
  for (const auto& d : {StatDomain::group(4), StatDomain::layer(), StatDomain::instance()}) {
    NormLayer layer = cond_layer(d, 8, 3, &rng);
    Tensor x = random_tensor({8, 8, 4, 4}, rng, -2, 2);
    Tensor c = random_tensor({8, 3}, rng);
    Tensor full = layer.forward(x, c);
    for (std::size_t i = 0; i < 8; ++i) {
      Tensor one = layer.forward(slice_rows(x, i, 1), slice_rows(c, i, 1));
      worst_layers = std::max(worst_layers, max_abs_diff(one.data(), slice_rows(full, i, 1).data()));
    }
  }

  auto cfg = ExperimentConfig::defaults(Task::Sqoop);
  cfg.norm_variant = NormVariant::AllGN;
  cfg.train_size = 8;
  cfg.val_size = 8;
  cfg.test_size = 8;
  const auto data = gen_sqoop(cfg.sqoop());
  const std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
  const auto b = make_batch(data.train, idx, cfg.sqoop());
  FilmNetwork gn(cfg.film(), 7);
  const double film_train = film_batch_gap(gn, b);
  gn.set_mode(NormMode::Eval);
  const double film_eval = film_batch_gap(gn, b);

  // Batch statistics: shift samples 1..7 away from sample 0.
  NormLayer bn = plain_layer(StatDomain::batch(), 2);
  Tensor x = random_tensor({8, 2, 3, 3}, rng);
  auto xd = x.mutable_data();
  for (std::size_t i = 18; i < xd.size(); ++i) xd[i] += 5.0;
  const double bn_gap = max_abs_diff(bn.forward(slice_rows(x, 0, 1)).data(), slice_rows(bn.forward(x), 0, 1).data());

  cfg.norm_variant = NormVariant::AllBN;
  FilmNetwork bn_net(cfg.film(), 7);
  const double bn_film = film_batch_gap(bn_net, b);

  const double worst = std::max({worst_layers, film_train, film_eval});
  return {worst <= 1e-12 && bn_gap > 1e-3,
          fmt("GN/LN/IN layers %.2e, all_gn FiLM train %.2e eval %.2e; Batch layer %.3f, all_bn FiLM %.3f",
              worst_layers, film_train, film_eval, bn_gap, bn_film)};
}

// ---- 5 ----------------------------------------------------------------------------

Verdict mode_consistency(const fs::path&) {
  NoGradGuard no_grad;
  std::mt19937_64 rng(505);
  Tensor probe = random_tensor({3, 8, 3, 3}, rng, -2, 2);
  double group_gap = 0.0;
  for (std::size_t g : {1, 2, 4, 8}) {
    NormLayer layer = cond_layer(StatDomain::group(g), 8, 2, &rng);
    Tensor c = random_tensor({3, 2}, rng);
    Tensor train = layer.forward(probe, c);
    layer.set_mode(NormMode::Eval);
    group_gap = std::max(group_gap, max_abs_diff(train.data(), layer.forward(probe, c).data()));
  }

  // Hand-verified stream: batch t holds {t, t + 2} in every position of a
  // single channel, so its mean is t + 1 and its biased variance is exactly 1.
  // With momentum 0.9 over t = 0..9:
  //   mu_run  = sum_t 0.1 * 0.9^(9 - t) * (t + 1)
  //   var_run = 1 - 0.9^10
  NormLayer bn = plain_layer(StatDomain::batch(), 1);
  for (int t = 0; t < 10; ++t) bn.forward(Tensor({2, 1, 1, 1}, {double(t), double(t + 2)}));
  double mu_closed = 0.0;
  for (int t = 0; t < 10; ++t) mu_closed += 0.1 * std::pow(0.9, 9 - t) * (t + 1);
  const double var_closed = 1.0 - std::pow(0.9, 10);
  bn.set_mode(NormMode::Eval);
  Tensor q({4, 1, 1, 1}, {-1.0, 0.5, 3.0, 11.0});
  Tensor out = bn.forward(q);
  double ema_gap = std::abs(bn.running()->mu[0] - mu_closed) + std::abs(bn.running()->var[0] - var_closed);
  for (std::size_t i = 0; i < 4; ++i) {
    ema_gap = std::max(ema_gap, std::abs(out[i] - (q[i] - mu_closed) / std::sqrt(var_closed + 1e-5)));
  }

  // Random stream with a fixed affine, against a scalar recurrence.
  NormLayerOptions o;
  o.domain = StatDomain::batch();
  o.channels = 4;
  o.affine = AffineKind::Fixed;
  NormLayer bn4(o);
  auto& fixed = std::get<FixedAffine>(bn4.affine());
  fixed.gamma = random_tensor({4}, rng, 0.5, 2.0);
  fixed.beta = random_tensor({4}, rng, -1, 1);
  std::vector<double> mu_run(4, 0.0), var_run(4, 0.0);
  for (int step = 0; step < 10; ++step) {
    Tensor batch = random_tensor({6, 4, 2, 2}, rng, -1.0 + 0.5 * step, 1.0 + 0.5 * step);
    bn4.forward(batch);
    for (std::size_t c = 0; c < 4; ++c) {
      double m = 0, v = 0;
      for (std::size_t n = 0; n < 6; ++n)
        for (std::size_t p = 0; p < 4; ++p) m += batch[(n * 4 + c) * 4 + p];
      m /= 24;
      for (std::size_t n = 0; n < 6; ++n)
        for (std::size_t p = 0; p < 4; ++p) v += std::pow(batch[(n * 4 + c) * 4 + p] - m, 2);
      v /= 24;
      mu_run[c] = 0.9 * mu_run[c] + 0.1 * m;
      var_run[c] = 0.9 * var_run[c] + 0.1 * v;
    }
  }
  bn4.set_mode(NormMode::Eval);
  Tensor probe4 = random_tensor({3, 4, 2, 2}, rng, -2, 2);
  Tensor out4 = bn4.forward(probe4);
  double stream_gap = 0.0;
  for (std::size_t i = 0; i < probe4.numel(); ++i) {
    const std::size_t c = (i / 4) % 4;
    const double want = (probe4[i] - mu_run[c]) / std::sqrt(var_run[c] + 1e-5) * fixed.gamma[c] + fixed.beta[c];
    stream_gap = std::max(stream_gap, std::abs(out4[i] - want));
  }
  return {group_gap <= 1e-12 && ema_gap <= 1e-12 && stream_gap <= 1e-12,
          fmt("Group train vs eval %.2e; hand EMA stream %.2e; random EMA stream %.2e", group_gap, ema_gap,
              stream_gap)};
}

// ---- 6 ----------------------------------------------------------------------------

double identity_gap(NormLayer& cond, const Tensor& x) {
  NormLayer plain = plain_layer(cond.domain(), cond.channels(), cond.eps());
  const std::size_t D = std::get<ConditionalAffine>(cond.affine()).cond_dim();
  Tensor want = plain.forward(x);
  return std::max(max_abs_diff(cond.forward(x, Tensor::zeros({D})).data(), want.data()),
                  max_abs_diff(cond.forward(x, Tensor::zeros({x.dim(0), D})).data(), want.data()));
}

Verdict identity_conditioning(const fs::path&) {
  NoGradGuard no_grad;
  std::mt19937_64 rng(606);
  double worst = 0.0;
  std::size_t layers = 0;
  for (const auto& d : domains_for(8)) {
    NormLayer cond = cond_layer(d, 8, 5);
    worst = std::max(worst, identity_gap(cond, random_tensor({4, 8, 3, 3}, rng, -2, 2)));
    ++layers;
  }
  // Every conditional layer of freshly built FiLM networks and of the
  // few-shot trunk layout.
  for (auto v : all_norm_variants()) {
    auto cfg = ExperimentConfig::defaults(Task::Sqoop);
    cfg.norm_variant = v;
    FilmNetwork net(cfg.film(), 3);
    for (auto& block : net.trunk().blocks()) {
      worst = std::max(worst, identity_gap(block.cond_norm, random_tensor({4, cfg.block_channels, 5, 5}, rng)));
      ++layers;
    }
  }
  for (auto domain : {DomainKind::Group, DomainKind::Batch}) {
    TrunkConfig tc;
    tc.in_channels = 3;
    tc.stem_channels = 8;
    tc.stem_layers = 1;
    tc.stem_patch = 2;
    tc.num_blocks = 2;
    tc.block_channels = 8;
    tc.cond_dim = 6;
    tc.groups = 4;
    tc.coord_maps = false;
    tc.block_domain = domain;
    ConditionedTrunk trunk(tc, rng);
    for (auto& block : trunk.blocks()) {
      worst = std::max(worst, identity_gap(block.cond_norm, random_tensor({4, 8, 4, 4}, rng)));
      ++layers;
    }
  }
  return {worst <= 1e-12, fmt("%zu conditional layers at init with c = 0, max gap %.2e", layers, worst)};
}

// ---- 7 ----------------------------------------------------------------------------

Verdict full_coverage(const fs::path& work) {
  auto cfg = ExperimentConfig::defaults(Task::Sqoop);
  cfg.alphabet = 10;
  cfg.rhs_per_lhs = 9;
  cfg.val_size = 1000;
  cfg.max_updates = 20000;
  cfg.target_accuracy = 0.99;
  cfg.patience = 0;
  cfg.validate();
  const TaskData data = load_task_data(cfg);

  bool pass = true;
  std::string detail;
  for (auto v : {NormVariant::AllBN, NormVariant::AllGN}) {
    cfg.norm_variant = v;
    const auto t0 = std::chrono::steady_clock::now();
    std::size_t reached = 0, tried = 0;
    std::string seeds;
    for (std::uint64_t seed = 0; seed < 3 && reached < 2 && (tried - reached) < 2; ++seed) {
      const fs::path dir = work / ("c7_" + to_string(v)) / ("seed_" + std::to_string(seed));
      const auto out = train_seed(cfg, data, seed, dir);
      double best_train = 0.0;
      std::size_t at = 0;
      for (const auto& r : read_metrics(dir / "metrics.csv")) {
        if (r.split == "train" && r.accuracy > best_train) {
          best_train = r.accuracy;
          at = r.step;
        }
      }
      const bool ok = !out.failed && best_train >= 0.99;
      reached += ok;
      ++tried;
      seeds += fmt(" s%llu=%.3f@%zu", static_cast<unsigned long long>(seed), best_train, at);
      progress(to_string(v) + fmt(" seed %llu: max train accuracy %.4f at step %zu (%.0f s)",
                                  static_cast<unsigned long long>(seed), best_train, at, seconds_since(t0)));
    }
    const double secs = seconds_since(t0);
    const bool ok = reached >= 2 && secs <= 900.0;
    pass = pass && ok;
    detail += fmt("%s%s %zu/%zu seeds >= 0.99 [%s ] %.0f s", detail.empty() ? "" : "; ", to_string(v).c_str(),
                  reached, tried, seeds.c_str(), secs);
  }
  return {pass, detail};
}

// ---- 8 ----------------------------------------------------------------------------

Verdict compositional_gap(const fs::path& work) {
  auto cfg = ExperimentConfig::defaults(Task::Sqoop);
  cfg.alphabet = 10;
  cfg.rhs_per_lhs = 1;
  cfg.max_updates = 5000;
  cfg.patience = 0;
  cfg.validate();
  const TaskData data = load_task_data(cfg);

  bool pass = true;
  std::string detail;
  double bn_test = 0.0, gn_test = 0.0;
  for (auto v : all_norm_variants()) {
    cfg.norm_variant = v;
    const auto t0 = std::chrono::steady_clock::now();
    const auto out = train_seed(cfg, data, 0, work / ("c8_" + to_string(v)));
    const double gap = out.train_accuracy - out.test_accuracy;
    pass = pass && !out.failed && gap >= 0.05;
    if (v == NormVariant::AllBN) bn_test = out.test_accuracy;
    if (v == NormVariant::AllGN) gn_test = out.test_accuracy;
    progress(to_string(v) + fmt(": train %.4f test %.4f gap %.4f (%.0f s)", out.train_accuracy, out.test_accuracy,
                                gap, seconds_since(t0)));
    detail += fmt("%s%s train %.3f test %.3f", detail.empty() ? "" : "; ", to_string(v).c_str(), out.train_accuracy,
                  out.test_accuracy);
  }
  detail += fmt("; ordering (informational): all_gn test %s all_bn test", gn_test > bn_test    ? ">"
                                                                         : gn_test < bn_test ? "<"
                                                                                             : "=");
  return {pass, detail};
}

// ---- 9 ----------------------------------------------------------------------------

Verdict fewshot(const fs::path& work) {
  auto cfg = ExperimentConfig::defaults(Task::Fewshot);
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const TaskData data = load_task_data(cfg);
  const auto out = train_seed(cfg, data, 0, work / "c9");
  const double secs = seconds_since(t0);

  Model model = load_checkpoint(work / "c9" / "checkpoint");
  model.set_mode(NormMode::Eval);
  NoGradGuard no_grad;
  double dup_gap = 0.0;
  for (std::uint64_t e = 0; e < 5; ++e) {
    const Episode ep = sample_episode(*data.pool, data.pool->test_classes, cfg.episodes(), 900 + e);
    Tensor support = stack_images(*data.pool, ep.support);
    Tensor query = stack_images(*data.pool, ep.query);
    const auto base = model.proto().forward(support, ep.support_labels, cfg.ways, query);
    std::vector<std::size_t> twice = ep.support, twice_labels = ep.support_labels;
    twice.insert(twice.end(), ep.support.begin(), ep.support.end());
    twice_labels.insert(twice_labels.end(), ep.support_labels.begin(), ep.support_labels.end());
    const auto dup = model.proto().forward(stack_images(*data.pool, twice), twice_labels, cfg.ways, query);
    dup_gap = std::max(dup_gap, max_abs_diff(base.logits.data(), dup.logits.data()));
  }
  const bool pass = !out.failed && out.test_accuracy >= 0.9 && out.updates <= 5000 && dup_gap <= 1e-12 &&
                    secs <= 600.0;
  return {pass, fmt("5-way 5-shot test accuracy %.4f after %zu episodes (best step %zu), duplicated support max "
                    "logit change %.2e, %.0f s",
                    out.test_accuracy, out.updates, out.best_step, dup_gap, secs)};
}

// ---- 10 ---------------------------------------------------------------------------

Verdict determinism(const fs::path& work) {
  auto cfg = ExperimentConfig::defaults(Task::Sqoop);
  cfg.alphabet = 4;
  cfg.train_size = 400;
  cfg.val_size = 200;
  cfg.test_size = 200;
  cfg.max_updates = 60;
  cfg.eval_interval = 20;
  cfg.train_eval_samples = 200;
  cfg.seeds = {0, 1};
  cfg.validate();
  train(cfg, work / "c10_a");
  train(cfg, work / "c10_b");
  const bool metrics_same = slurp(work / "c10_a" / "metrics.csv") == slurp(work / "c10_b" / "metrics.csv") &&
                            !slurp(work / "c10_a" / "metrics.csv").empty();

  auto fcfg = ExperimentConfig::defaults(Task::Fewshot);
  fcfg.max_updates = 20;
  fcfg.eval_interval = 10;
  fcfg.eval_episodes = 10;
  fcfg.test_episodes = 20;
  fcfg.seeds = {3};
  train(fcfg, work / "c10_fa");
  train(fcfg, work / "c10_fb");
  const bool fewshot_same = slurp(work / "c10_fa" / "metrics.csv") == slurp(work / "c10_fb" / "metrics.csv");

  // Reload each checkpoint and rescore the logged test row.
  bool ckpt_exact = true;
  const auto rows = read_metrics(work / "c10_a" / "metrics.csv");
  for (std::uint64_t seed : cfg.seeds) {
    const fs::path ck = work / "c10_a" / ("seed_" + std::to_string(seed)) / "checkpoint";
    const auto info = read_checkpoint_info(ck);
    Model m = load_checkpoint(ck);
    const auto r = evaluate_model(m, info.config, load_task_data(info.config), "test", 0);
    bool found = false;
    for (const auto& row : rows) {
      if (row.seed == seed && row.split == "test") {
        found = true;
        ckpt_exact = ckpt_exact && row.step == info.step && row.accuracy == r.accuracy && row.loss == r.loss;
      }
    }
    ckpt_exact = ckpt_exact && found;
  }

  bool data_same = true;
  for (const auto& c : {cfg, fcfg}) {
    const std::string tag = to_string(c.task);
    gen_data(c, work / ("c10_d1_" + tag));
    gen_data(c, work / ("c10_d2_" + tag));
    for (const auto& entry : fs::directory_iterator(work / ("c10_d1_" + tag))) {
      data_same = data_same && slurp(entry.path()) == slurp(work / ("c10_d2_" + tag) / entry.path().filename());
    }
  }
  return {metrics_same && fewshot_same && ckpt_exact && data_same,
          fmt("sqoop metrics %s, fewshot metrics %s, checkpoint rescoring %s, regenerated datasets %s",
              metrics_same ? "identical" : "DIFFER", fewshot_same ? "identical" : "DIFFER",
              ckpt_exact ? "exact" : "INEXACT", data_same ? "identical" : "DIFFER")};
}

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> all = {
      {1, "statistics match brute-force enumeration", statistics_oracle},
      {2, "GN(1) = LN and GN(C) = IN", degeneracy},
      {3, "gradient suite", gradient_suite},
      {4, "batch-size invariance", batch_invariance},
      {5, "train/eval mode consistency", mode_consistency},
      {6, "identity conditioning", identity_conditioning},
      {7, "full-coverage SQOOP reaches 99% train accuracy", full_coverage},
      {8, "compositional gap with one rhs per lhs", compositional_gap},
      {9, "few-shot accuracy and support duplication", fewshot},
      {10, "determinism and round trips", determinism},
  };
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"normlab acceptance suite"};
  std::vector<int> selected;
  std::string workdir;
  bool keep = false;
  app.add_option("--criterion", selected, "Criterion number (repeatable); default all")->check(CLI::Range(1, 10));
  app.add_option("--workdir", workdir, "Scratch directory for training runs");
  app.add_flag("--keep", keep, "Keep the scratch directory");
  CLI11_PARSE(app, argc, argv);

  fs::path work = workdir.empty()
                      ? fs::temp_directory_path() / ("normlab_acceptance_" + std::to_string(::getpid()))
                      : fs::path(workdir);
  fs::create_directories(work);

  int failures = 0;
  for (const auto& c : criteria()) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run(work / ("criterion_" + std::to_string(c.id)));
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    failures += !v.pass;
    std::cout << fmt("criterion %2d %s  %s: %s [%.1f s]", c.id, v.pass ? "PASS" : "FAIL", c.title.c_str(),
                     v.detail.c_str(), seconds_since(t0))
              << std::endl;
  }
  if (!keep && workdir.empty()) fs::remove_all(work);
  return failures == 0 ? 0 : 1;
}
