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
#include "normlab/gradcheck_suite.hpp"

#include <algorithm>
#include <cstdio>
#include <random>
#include <set>
#include <sstream>

#include "normlab/autograd.hpp"
#include "normlab/film.hpp"
#include "normlab/gradcheck.hpp"
#include "normlab/ops.hpp"
#include "normlab/proto.hpp"

namespace normlab {

namespace {

Tensor uniform(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> d(shape_numel(s));
  for (auto& v : d) v = u(rng);
  return Tensor(s, std::move(d));
}

Tensor leaf(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  return uniform(s, rng, lo, hi).set_requires_grad();
}

// Values bounded away from zero, for kinks and divisors.
Tensor away_from_zero(const Shape& s, std::mt19937_64& rng) {
  Tensor t = uniform(s, rng);
  for (double& v : t.mutable_data()) v = (v < 0 ? -0.2 : 0.2) + v;
  return t.set_requires_grad();
}

void randomize(NamedTensors params, std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& [name, t] : params) {
    for (double& v : t.mutable_data()) v += u(rng);
  }
}

struct Case {
  std::string name;
  ScalarFn loss;
  NamedTensors wrt;
};

// Weighted sum so every output element gets a distinct adjoint.
ScalarFn probe(std::function<Tensor()> f, std::uint64_t seed) {
  auto w = std::make_shared<Tensor>();
  return [f, w, seed] {
    Tensor y = f();
    if (!w->defined() || w->shape() != y.shape()) {
      std::mt19937_64 rng(seed);
      *w = uniform(y.shape(), rng);
    }
    return sum_all(mul(y, *w));
  };
}

std::vector<Case> op_cases() {
  std::mt19937_64 rng(2024);
  std::vector<Case> cs;
  auto unary = [&](const std::string& name, std::function<Tensor(const Tensor&)> f, Tensor x) {
    cs.push_back({name, probe([f, x] { return f(x); }, cs.size()), {{"x", x}}});
  };
  auto binary = [&](const std::string& name, std::function<Tensor(const Tensor&, const Tensor&)> f, Tensor a,
                    Tensor b) {
    cs.push_back({name, probe([f, a, b] { return f(a, b); }, cs.size()), {{"a", a}, {"b", b}}});
  };
  binary("add", add, leaf({2, 3}, rng), leaf({1, 3}, rng));
  binary("sub", sub, leaf({2, 3, 2}, rng), leaf({2, 1, 2}, rng));
  binary("mul", mul, leaf({2, 3}, rng), leaf({2, 1}, rng));
  binary("div", div, leaf({2, 3}, rng), away_from_zero({1, 3}, rng));
  unary("add_scalar", [](const Tensor& x) { return add_scalar(x, 0.7); }, leaf({3, 2}, rng));
  unary("scale", [](const Tensor& x) { return scale(x, -1.3); }, leaf({3, 2}, rng));
  unary("relu", relu, away_from_zero({2, 5}, rng));
  unary("sigmoid", sigmoid, leaf({2, 5}, rng, -3, 3));
  unary("tanh", normlab::tanh, leaf({2, 5}, rng, -2, 2));
  unary("sqrt", normlab::sqrt, leaf({2, 5}, rng, 0.5, 2.0));
  unary("softplus", softplus, leaf({2, 5}, rng, -3, 3));
  unary("sum", [](const Tensor& x) { return sum(x, {1}); }, leaf({2, 3, 2}, rng));
  unary("mean", [](const Tensor& x) { return mean(x, {0, 2}); }, leaf({2, 3, 2}, rng));
  unary("max", [](const Tensor& x) { return max(x, {1, 2}); }, leaf({2, 3, 4}, rng));
  unary("reshape", [](const Tensor& x) { return reshape(x, {3, 4}); }, leaf({2, 6}, rng));
  binary("concat", [](const Tensor& a, const Tensor& b) { return concat({a, b}, 1); }, leaf({2, 1, 3}, rng),
         leaf({2, 2, 3}, rng));
  binary("matmul", matmul, leaf({3, 4}, rng), leaf({4, 2}, rng));
  {
    Tensor x = leaf({3, 4}, rng), w = leaf({2, 4}, rng), b = leaf({2}, rng);
    cs.push_back({"linear", probe([=] { return linear(x, w, b); }, cs.size()), {{"x", x}, {"w", w}, {"bias", b}}});
  }
  {
    Tensor x = leaf({2, 2, 4, 3}, rng), w = leaf({3, 2, 3, 3}, rng), b = leaf({3}, rng);
    cs.push_back({"conv2d", probe([=] { return conv2d(x, w, b, 1); }, cs.size()), {{"x", x}, {"w", w}, {"bias", b}}});
  }
  unary("max_pool2d", [](const Tensor& x) { return max_pool2d(x, 2); }, leaf({2, 2, 4, 4}, rng));
  unary("space_to_depth", [](const Tensor& x) { return space_to_depth(x, 2); }, leaf({1, 2, 4, 2}, rng));
  {
    Tensor table = leaf({5, 3}, rng);
    const std::vector<std::size_t> ids{4, 0, 4, 2};
    cs.push_back({"embedding", probe([=] { return embedding(table, ids); }, cs.size()), {{"table", table}}});
  }
  const Shape xs{2, 4, 2, 3};
  const std::vector<std::size_t> plane_set{0, 0, 1, 1, 2, 2, 3, 3};
  unary("set_mean", [=](const Tensor& x) { return set_mean(x, plane_set, 4); }, leaf(xs, rng));
  unary("set_broadcast", [=](const Tensor& v) { return set_broadcast(v, plane_set, xs); }, leaf({4}, rng));
  unary("set_normalize", [=](const Tensor& x) { return set_normalize(x, plane_set, 4, 1e-5); }, leaf(xs, rng));
  {
    Tensor logits = leaf({3, 4}, rng, -2, 2);
    const std::vector<std::size_t> labels{1, 3, 0};
    cs.push_back({"softmax_xent", [=] { return softmax_xent(logits, labels); }, {{"logits", logits}}});
  }
  return cs;
}

std::vector<Case> norm_cases() {
  std::mt19937_64 rng(77);
  std::vector<Case> cs;
  const std::vector<StatDomain> domains{StatDomain::batch(), StatDomain::layer(), StatDomain::instance(),
                                        StatDomain::group(2)};
  for (const auto& d : domains) {
    for (auto affine : {AffineKind::None, AffineKind::Fixed, AffineKind::Conditional}) {
      NormLayerOptions o;
      o.domain = d;
      o.channels = 4;
      o.affine = affine;
      o.cond_dim = affine == AffineKind::Conditional ? 3 : 0;
      auto layer = std::make_shared<NormLayer>(o);
      randomize(layer->parameters(), rng, 0.5);
      Tensor x = leaf({3, 4, 2, 3}, rng, -2, 2);
      NamedTensors wrt = layer->parameters();
      wrt.emplace_back("x", x);
      std::optional<Tensor> c;
      if (affine == AffineKind::Conditional) {
        c = leaf({3, 3}, rng);
        wrt.emplace_back("c", *c);
      }
      cs.push_back({d.name() + "/" + to_string(affine), probe([=] { return layer->forward(x, c); }, cs.size()), wrt});
    }
  }
  {
    NormLayerOptions o;
    o.domain = StatDomain::batch();
    o.channels = 4;
    auto layer = std::make_shared<NormLayer>(o);
    {
      NoGradGuard guard;
      for (int i = 0; i < 3; ++i) layer->forward(uniform({3, 4, 2, 2}, rng, -2, 2));
    }
    layer->set_mode(NormMode::Eval);
    Tensor x = leaf({2, 4, 2, 2}, rng, -2, 2);
    NamedTensors wrt = layer->parameters();
    wrt.emplace_back("x", x);
    cs.push_back({"batch/eval", probe([=] { return layer->forward(x); }, cs.size()), wrt});
  }
  return cs;
}

FilmConfig micro_film(NormVariant v) {
  FilmConfig c;
  c.stem_channels = 4;
  c.stem_layers = 2;
  c.stem_patch = 2;
  c.num_blocks = 1;
  c.block_channels = 4;
  c.classifier_channels = 4;
  c.fc_hidden = 4;
  c.vocab = 5;
  c.embed_dim = 3;
  c.gru_hidden = 3;
  c.groups = 2;
  c.variant = v;
  return c;
}

std::vector<Case> model_cases() {
  std::mt19937_64 rng(5);
  std::vector<Case> cs;
  for (auto v : all_norm_variants()) {
    auto net = std::make_shared<FilmNetwork>(micro_film(v), 5);
    Tensor x = leaf({2, 1, 4, 4}, rng, 0, 1);
    NamedTensors wrt = net->parameters();
    wrt.emplace_back("images", x);
    const std::vector<std::size_t> labels{0, 1};
    cs.push_back({"film/" + to_string(v),
                  [=] { return softmax_xent(net->forward(x, {{1, 2, 3}, {4, 0, 2}}), labels); }, wrt});
  }
  {
    ProtoConfig pc;
    pc.in_channels = 2;
    pc.stem_channels = 4;
    pc.stem_layers = 1;
    pc.stem_patch = 2;
    pc.num_blocks = 1;
    pc.block_channels = 4;
    pc.embed_dim = 3;
    pc.task_dim = 2;
    pc.groups = 2;
    auto head = std::make_shared<ProtoHead>(pc, 4);
    Tensor s = leaf({4, 2, 4, 4}, rng, 0, 1), q = leaf({2, 2, 4, 4}, rng, 0, 1);
    NamedTensors wrt = head->parameters();
    wrt.emplace_back("support", s);
    wrt.emplace_back("query", q);
    const std::vector<std::size_t> labels{0, 1, 1, 0}, qlabels{1, 0};
    cs.push_back({"proto_head", [=] { return softmax_xent(head->forward(s, labels, 2, q).logits, qlabels); }, wrt});
  }
  {
    auto gru = std::make_shared<GruEncoder>(GruEncoder::create(6, 3, 4, rng));
    cs.push_back({"gru", probe([=] { return gru->encode_batch({{1, 3, 0}, {4, 5, 2}}); }, 9), gru->parameters()});
  }
  for (auto kind : {DomainKind::Group, DomainKind::Batch}) {
    auto block = std::make_shared<FilmBlock>(FilmBlock::create(4, 3, make_domain(kind, 2), 1e-5, true, rng));
    randomize(block->parameters(), rng, 0.3);
    Tensor x = leaf({2, 4, 3, 3}, rng), c = leaf({2, 3}, rng);
    NamedTensors wrt = block->parameters();
    wrt.emplace_back("x", x);
    wrt.emplace_back("c", c);
    cs.push_back({"film_block/" + to_string(kind), probe([=] { return block->forward(x, c); }, 11), wrt});
  }
  return cs;
}

ComponentCheck run_case(const std::string& suite, const Case& c, double tol) {
  ComponentCheck r;
  r.suite = suite;
  r.name = c.name;
  const auto g = check_gradients(c.loss, c.wrt);
  r.worst_rel_error = g.worst_rel_error;
  r.worst_location = g.worst_location;
  r.checked = g.checked;
  r.passed = g.checked > 0 && g.worst_rel_error <= tol;
  return r;
}

// Clears fault injection even when a check throws.
struct FaultScope {
  explicit FaultScope(const std::string& op) { Tape::current().set_fault_injection(op); }
  ~FaultScope() { Tape::current().set_fault_injection(""); }
};

}  // namespace

bool GradcheckReport::passed() const {
  if (components.empty()) return false;
  if (ops_suite_ran && !uncovered_ops.empty()) return false;
  return std::all_of(components.begin(), components.end(), [](const ComponentCheck& c) { return c.passed; });
}

std::string GradcheckReport::format() const {
  std::ostringstream os;
  char buf[64];
  for (const auto& c : components) {
    std::snprintf(buf, sizeof buf, "%.3e", c.worst_rel_error);
    os << (c.passed ? "PASS " : "FAIL ") << c.suite << "/" << c.name << "  worst_rel_error=" << buf
       << "  checked=" << c.checked;
    if (!c.worst_location.empty()) os << "  at=" << c.worst_location;
    os << "\n";
  }
  if (ops_suite_ran) {
    os << "coverage " << covered_ops.size() << "/" << differentiable_ops().size() << " registered ops";
    for (const auto& op : uncovered_ops) os << " missing:" << op;
    os << "\n";
  }
  std::snprintf(buf, sizeof buf, "%.0e", tolerance);
  os << (passed() ? "gradcheck passed" : "gradcheck FAILED") << " (tolerance " << buf << ")\n";
  return os.str();
}

GradcheckReport run_gradcheck(const std::string& scope, double tolerance, const std::string& inject_fault) {
  if (scope != "all" && scope != "ops" && scope != "norm" && scope != "models") {
    throw ConfigError("unknown gradcheck scope '" + scope + "' (expected all, ops, norm or models)");
  }
  if (!inject_fault.empty()) {
    const auto ops = differentiable_ops();
    if (std::find(ops.begin(), ops.end(), inject_fault) == ops.end()) {
      throw ConfigError("cannot inject a fault into unknown op '" + inject_fault + "'");
    }
  }
  GradcheckReport report;
  report.tolerance = tolerance;
  FaultScope fault(inject_fault);

  if (scope == "all" || scope == "ops") {
    report.ops_suite_ran = true;
    std::set<std::string> covered;
    for (const auto& c : op_cases()) {
      Tape::current().clear();
      c.loss();
      const auto recorded = Tape::current().recorded_ops();
      Tape::current().clear();
      auto r = run_case("ops", c, tolerance);
      if (std::find(recorded.begin(), recorded.end(), c.name) == recorded.end()) {
        r.passed = false;
        r.worst_location = "op not recorded";
      } else if (r.passed) {
        covered.insert(c.name);
      }
      report.components.push_back(std::move(r));
    }
    for (auto op : differentiable_ops()) {
      if (covered.count(std::string(op))) report.covered_ops.emplace_back(op);
      else report.uncovered_ops.emplace_back(op);
    }
  }
  if (scope == "all" || scope == "norm") {
    for (const auto& c : norm_cases()) report.components.push_back(run_case("norm", c, tolerance));
  }
  if (scope == "all" || scope == "models") {
    for (const auto& c : model_cases()) report.components.push_back(run_case("models", c, tolerance));
  }
  return report;
}

}  // namespace normlab
