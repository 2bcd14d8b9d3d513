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

#include <cmath>
#include <map>

#include "normlab/autograd.hpp"
#include "normlab/film.hpp"
#include "normlab/gradcheck.hpp"
#include "normlab/ops.hpp"
#include "normlab/optim.hpp"
#include "normlab/proto.hpp"
#include "test_util.hpp"

using namespace normlab;
using namespace normlab::testing;

namespace {

// Standard GRU equations evaluated one scalar at a time.
std::vector<double> gru_oracle(const GruEncoder& g, const std::vector<std::size_t>& tokens) {
  const std::size_t H = g.hidden(), E = g.embedding.dim(1);
  auto at = [](const Tensor& t, std::size_t r, std::size_t c) { return t.data()[r * t.dim(1) + c]; };
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  std::vector<double> h(H, 0.0);
  for (std::size_t tok : tokens) {
    std::vector<double> x(E);
    for (std::size_t e = 0; e < E; ++e) x[e] = at(g.embedding, tok, e);
    std::vector<double> z(H), r(H), next(H);
    for (std::size_t i = 0; i < H; ++i) {
      double az = g.b_z[i], ar = g.b_r[i];
      for (std::size_t e = 0; e < E; ++e) {
        az += at(g.w_z, i, e) * x[e];
        ar += at(g.w_r, i, e) * x[e];
      }
      for (std::size_t j = 0; j < H; ++j) {
        az += at(g.u_z, i, j) * h[j];
        ar += at(g.u_r, i, j) * h[j];
      }
      z[i] = sig(az);
      r[i] = sig(ar);
    }
    for (std::size_t i = 0; i < H; ++i) {
      double a = g.b_h[i];
      for (std::size_t e = 0; e < E; ++e) a += at(g.w_h, i, e) * x[e];
      for (std::size_t j = 0; j < H; ++j) a += at(g.u_h, i, j) * r[j] * h[j];
      next[i] = (1.0 - z[i]) * h[i] + z[i] * std::tanh(a);
    }
    h = next;
  }
  return h;
}

FilmConfig micro_film(NormVariant v) {
  FilmConfig c;
  c.in_channels = 1;
  c.stem_channels = 4;
  c.stem_layers = 2;
  c.stem_patch = 2;
  c.num_blocks = 1;
  c.block_channels = 4;
  c.classifier_channels = 4;
  c.fc_hidden = 4;
  c.num_answers = 2;
  c.vocab = 5;
  c.embed_dim = 3;
  c.gru_hidden = 3;
  c.groups = 2;
  c.variant = v;
  return c;
}

ProtoConfig micro_proto() {
  ProtoConfig c;
  c.in_channels = 2;
  c.stem_channels = 4;
  c.stem_layers = 1;
  c.stem_patch = 2;
  c.num_blocks = 1;
  c.block_channels = 4;
  c.embed_dim = 3;
  c.task_dim = 2;
  c.groups = 2;
  return c;
}

Tensor sample_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  const std::size_t per = x.numel() / x.dim(0);
  std::vector<double> d;
  for (std::size_t r : rows) d.insert(d.end(), x.data().begin() + r * per, x.data().begin() + (r + 1) * per);
  Shape s = x.shape();
  s[0] = rows.size();
  return Tensor(s, std::move(d));
}

}  // namespace

// ---- GRU ------------------------------------------------------------------

TEST(Gru, EmptySequenceGivesZeroState) {
  std::mt19937_64 rng(1);
  auto g = GruEncoder::create(5, 3, 4, rng);
  Tensor h = g.encode({});
  ASSERT_EQ(h.shape(), (Shape{4}));
  for (double v : h.data()) EXPECT_EQ(v, 0.0);
}

TEST(Gru, ZeroParametersStayAtZero) {
  std::mt19937_64 rng(2);
  auto g = GruEncoder::create(5, 3, 4, rng);
  for (auto& [n, p] : g.parameters()) {
    for (double& v : p.mutable_data()) v = 0.0;
  }
  std::vector<std::size_t> one{2};
  const Tensor h = g.encode(one);
  for (double v : h.data()) EXPECT_EQ(v, 0.0);
}

TEST(Gru, MatchesScalarRecurrence) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto g = GruEncoder::create(7, 4, 5, rng);
    std::uniform_int_distribution<std::size_t> tok(0, 6);
    std::vector<std::size_t> seq{tok(rng), tok(rng), tok(rng)};
    EXPECT_LE(max_abs_diff(g.encode(seq).data(), gru_oracle(g, seq)), 1e-12);
  }
}

TEST(Gru, BatchedEncodingMatchesSingle) {
  std::mt19937_64 rng(4);
  auto g = GruEncoder::create(6, 3, 4, rng);
  std::vector<std::vector<std::size_t>> seqs{{1, 2, 3}, {5, 0, 4}, {2, 2, 2}};
  Tensor batch = g.encode_batch(seqs);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    std::vector<double> row(batch.data().begin() + i * 4, batch.data().begin() + (i + 1) * 4);
    EXPECT_LE(max_abs_diff(row, g.encode(seqs[i]).data()), 1e-15);
  }
}

TEST(Gru, HiddenStateStaysInsideUnitInterval) {
  std::mt19937_64 rng(5);
  auto g = GruEncoder::create(4, 3, 6, rng);
  for (auto& [n, p] : g.parameters()) {
    for (double& v : p.mutable_data()) v *= 3.0;
  }
  std::vector<std::size_t> seq;
  for (int t = 0; t < 30; ++t) {
    seq.push_back(static_cast<std::size_t>(t % 4));
    const Tensor h = g.encode(seq);
    for (double v : h.data()) {
      EXPECT_LT(std::abs(v), 1.0);
    }
  }
}

TEST(Gru, RejectsOutOfVocabularyToken) {
  std::mt19937_64 rng(6);
  auto g = GruEncoder::create(4, 3, 2, rng);
  std::vector<std::size_t> bad{1, 4};
  EXPECT_THROW(g.encode(bad), ShapeError);
}

TEST(Gru, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(7);
  auto g = GruEncoder::create(5, 3, 4, rng);
  Tensor probe = random_tensor({2, 4}, rng);
  auto r = check_gradients([&] { return sum_all(mul(g.encode_batch({{1, 3, 0}, {4, 4, 2}}), probe)); },
                           g.parameters());
  EXPECT_LE(r.worst_rel_error, 1e-4) << r.worst_location;
}

// ---- FiLM block ------------------------------------------------------------

TEST(FilmBlock, ZeroConvolutionsGiveResidualIdentity) {
  std::mt19937_64 rng(10);
  auto b = FilmBlock::create(4, 3, StatDomain::group(2), 1e-5, true, rng);
  for (auto* t : {&b.conv_1x1.weight, &b.conv_1x1.bias, &b.conv_3x3.weight, &b.conv_3x3.bias}) {
    for (double& v : t->mutable_data()) v = 0.0;
  }
  Tensor x = random_tensor({2, 4, 3, 3}, rng);
  Tensor out = b.forward(x, Tensor::zeros({3}));
  EXPECT_EQ(max_abs_diff(out.data(), x.data()), 0.0);
}

TEST(FilmBlock, PreservesShape) {
  std::mt19937_64 rng(11);
  for (std::size_t ch : {4u, 8u, 16u}) {
    for (bool coords : {false, true}) {
      auto b = FilmBlock::create(ch, 5, StatDomain::group(4), 1e-5, coords, rng);
      Tensor x = random_tensor({3, ch, 4, 5}, rng);
      EXPECT_EQ(b.forward(x, random_tensor({3, 5}, rng)).shape(), x.shape());
    }
  }
}

TEST(FilmBlock, RejectsChannelMismatch) {
  std::mt19937_64 rng(12);
  auto b = FilmBlock::create(4, 3, StatDomain::group(2), 1e-5, false, rng);
  EXPECT_THROW(b.forward(random_tensor({1, 6, 3, 3}, rng), Tensor::zeros({3})), ShapeError);
}

TEST(FilmBlock, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(13);
  for (auto d : {StatDomain::group(2), StatDomain::batch()}) {
    auto b = FilmBlock::create(4, 3, d, 1e-5, true, rng);
    // Nonzero conditioning weights so the gradient reaches c.
    auto& aff = std::get<ConditionalAffine>(b.cond_norm.affine());
    for (double& v : aff.w_gamma.mutable_data()) v = 0.3;
    for (double& v : aff.w_beta.mutable_data()) v = -0.2;
    Tensor x = random_tensor({2, 4, 3, 3}, rng, -1.0, 1.0, true);
    Tensor c = random_tensor({2, 3}, rng, -1.0, 1.0, true);
    NamedTensors wrt = b.parameters();
    wrt.emplace_back("x", x);
    wrt.emplace_back("c", c);
    auto r = check_gradients([&] { return mean_all(b.forward(x, c)); }, wrt);
    EXPECT_LE(r.worst_rel_error, 1e-4) << d.name() << " " << r.worst_location;
  }
}

// ---- FiLM network ----------------------------------------------------------

TEST(FilmNetwork, VariantWiring) {
  using D = DomainKind;
  std::map<NormVariant, std::vector<std::pair<std::string, D>>> expected = {
      {NormVariant::AllGN,
       {{"trunk.stem.0", D::Group}, {"trunk.stem.1", D::Group}, {"trunk.block.0", D::Group},
        {"classifier.norm", D::Group}}},
      {NormVariant::GNWithBNStem,
       {{"trunk.stem.0", D::Batch}, {"trunk.stem.1", D::Batch}, {"trunk.block.0", D::Group},
        {"classifier.norm", D::Batch}}},
      {NormVariant::GNWithBNStemNoClassifierNorm,
       {{"trunk.stem.0", D::Batch}, {"trunk.stem.1", D::Batch}, {"trunk.block.0", D::Group}}},
      {NormVariant::AllBN,
       {{"trunk.stem.0", D::Batch}, {"trunk.stem.1", D::Batch}, {"trunk.block.0", D::Batch},
        {"classifier.norm", D::Batch}}},
  };
  for (auto v : all_norm_variants()) {
    FilmNetwork net(micro_film(v), 1);
    auto layers = net.norm_layers();
    const auto& want = expected.at(v);
    ASSERT_EQ(layers.size(), want.size()) << to_string(v);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      EXPECT_EQ(layers[i].name, want[i].first);
      EXPECT_EQ(layers[i].domain, want[i].second) << to_string(v) << " " << layers[i].name;
      const bool block = layers[i].name.find("block") != std::string::npos;
      EXPECT_EQ(layers[i].affine, block ? AffineKind::Conditional : AffineKind::Fixed);
    }
  }
}

TEST(FilmNetwork, VariantNamesRoundTrip) {
  for (auto v : all_norm_variants()) EXPECT_EQ(norm_variant_from_string(to_string(v)), v);
  EXPECT_THROW(norm_variant_from_string("all_ln"), ConfigError);
}

TEST(FilmNetwork, GroupsMustDivideWidths) {
  FilmConfig c = micro_film(NormVariant::AllGN);
  c.groups = 3;
  EXPECT_THROW(FilmNetwork(c, 1), ConfigError);
}

TEST(FilmNetwork, RejectsMismatchedQuestions) {
  FilmNetwork net(micro_film(NormVariant::AllGN), 2);
  std::mt19937_64 rng(2);
  EXPECT_THROW(net.forward(random_tensor({2, 1, 4, 4}, rng), {{1, 2, 3}}), ShapeError);
}

TEST(FilmNetwork, GroupVariantIsPerSample) {
  FilmNetwork net(micro_film(NormVariant::AllGN), 3);
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({8, 1, 4, 4}, rng);
  std::vector<std::vector<std::size_t>> q;
  for (std::size_t i = 0; i < 8; ++i) q.push_back({i % 5, (i + 1) % 5, (i + 3) % 5});
  Tensor full = net.forward(x, q);
  for (std::size_t i = 0; i < 8; ++i) {
    Tensor one = net.forward(sample_rows(x, {i}), {q[i]});
    EXPECT_LE(max_abs_diff(one.data(), sample_rows(full, {i}).data()), 1e-12);
  }
  std::vector<std::size_t> perm{3, 0, 7, 1, 6, 2, 5, 4};
  std::vector<std::vector<std::size_t>> qp;
  for (auto p : perm) qp.push_back(q[p]);
  Tensor permuted = net.forward(sample_rows(x, perm), qp);
  EXPECT_LE(max_abs_diff(permuted.data(), sample_rows(full, perm).data()), 1e-12);
}

TEST(FilmNetwork, BatchVariantDependsOnBatchInTraining) {
  FilmNetwork net(micro_film(NormVariant::AllBN), 3);
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({8, 1, 4, 4}, rng);
  std::vector<std::vector<std::size_t>> q(8, {1, 2, 3});
  Tensor full = net.forward(x, q);
  Tensor two = net.forward(sample_rows(x, {0, 1}), {q[0], q[1]});
  EXPECT_GT(max_abs_diff(two.data(), sample_rows(full, {0, 1}).data()), 1e-3);
}

TEST(FilmNetwork, InitialLossNearChance) {
  FilmConfig c;  // default widths
  c.stem_patch = 7;
  for (auto v : {NormVariant::AllBN, NormVariant::AllGN}) {
    c.variant = v;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      FilmNetwork net(c, seed);
      std::mt19937_64 rng(seed + 100);
      Tensor x = random_tensor({8, 1, 35, 35}, rng, 0.0, 1.0);
      std::vector<std::vector<std::size_t>> q(8, {1, 10, 2});
      std::vector<std::size_t> labels{0, 1, 0, 1, 0, 1, 0, 1};
      NoGradGuard ng;
      const double loss = softmax_xent(net.forward(x, q), labels).item();
      EXPECT_NEAR(loss, std::log(2.0), 0.1 * std::log(2.0)) << to_string(v) << " seed " << seed;
    }
  }
}

TEST(FilmNetwork, MicroNetGradients) {
  for (auto v : all_norm_variants()) {
    FilmNetwork net(micro_film(v), 5);
    std::mt19937_64 rng(5);
    Tensor x = random_tensor({2, 1, 4, 4}, rng, 0.0, 1.0, true);
    std::vector<std::size_t> labels{0, 1};
    NamedTensors wrt = net.parameters();
    wrt.emplace_back("images", x);
    auto r = check_gradients([&] { return softmax_xent(net.forward(x, {{1, 2, 3}, {4, 0, 2}}), labels); }, wrt);
    EXPECT_LE(r.worst_rel_error, 1e-4) << to_string(v) << " " << r.worst_location;
  }
}

// ---- prototype head -------------------------------------------------------

TEST(ProtoLogits, EquidistantQueryTies) {
  Tensor protos({2, 2}, {1.0, 0.0, -1.0, 0.0});
  Tensor q({1, 2}, {0.0, 3.0});
  Tensor l = prototype_logits_from_embeddings(q, protos, Tensor({1}, {0.7}));
  EXPECT_EQ(l[0], l[1]);
}

TEST(ProtoLogits, AlphaScalesLogits) {
  std::mt19937_64 rng(20);
  Tensor q = random_tensor({4, 3}, rng), p = random_tensor({5, 3}, rng);
  Tensor base = prototype_logits_from_embeddings(q, p, Tensor({1}, {1.0}));
  Tensor scaled = prototype_logits_from_embeddings(q, p, Tensor({1}, {2.5}));
  for (std::size_t i = 0; i < base.numel(); ++i) EXPECT_NEAR(scaled[i], 2.5 * base[i], 1e-12);
  for (std::size_t r = 0; r < 4; ++r) {
    auto row = [&](const Tensor& t) {
      return std::max_element(t.data().begin() + r * 5, t.data().begin() + (r + 1) * 5) - t.data().begin();
    };
    EXPECT_EQ(row(base), row(scaled));
  }
}

TEST(ProtoLogits, OneHotEmbeddingsHandComputed) {
  // Prototypes e1, e2; query 2 e1. Distances 1 and 5.
  Tensor protos({2, 2}, {1.0, 0.0, 0.0, 1.0});
  Tensor q({1, 2}, {2.0, 0.0});
  Tensor l = prototype_logits_from_embeddings(q, protos, Tensor({1}, {0.5}));
  EXPECT_NEAR(l[0], -0.5, 1e-10);
  EXPECT_NEAR(l[1], -2.5, 1e-10);
}

TEST(ProtoHead, AlphaStartsAtOneAndStaysPositive) {
  ProtoHead head(micro_proto(), 1);
  EXPECT_NEAR(head.alpha().item(), 1.0, 1e-12);
  for (double& v : head.alpha_raw().mutable_data()) v = -40.0;
  EXPECT_GT(head.alpha().item(), 0.0);
}

TEST(ProtoHead, MissingClassIsRejected) {
  ProtoHead head(micro_proto(), 2);
  std::mt19937_64 rng(2);
  Tensor s = random_tensor({2, 2, 4, 4}, rng);
  std::vector<std::size_t> labels{0, 0};
  EXPECT_THROW(head.forward(s, labels, 2, random_tensor({1, 2, 4, 4}, rng)), ShapeError);
}

TEST(ProtoHead, DuplicatingSupportChangesNothing) {
  for (auto d : {DomainKind::Group, DomainKind::Batch}) {
    ProtoConfig c = micro_proto();
    c.domain = d;
    ProtoHead head(c, 3);
    std::mt19937_64 rng(3);
    Tensor s = random_tensor({4, 2, 4, 4}, rng);
    std::vector<std::size_t> labels{0, 1, 2, 0};
    Tensor q = random_tensor({3, 2, 4, 4}, rng);
    auto base = head.forward(s, labels, 3, q);
    Tensor s2 = sample_rows(s, {0, 1, 2, 3, 0, 1, 2, 3});
    std::vector<std::size_t> labels2{0, 1, 2, 0, 0, 1, 2, 0};
    auto dup = head.forward(s2, labels2, 3, q);
    EXPECT_LE(max_abs_diff(base.prototypes.data(), dup.prototypes.data()), 1e-12);
    EXPECT_LE(max_abs_diff(base.task.data(), dup.task.data()), 1e-12);
    EXPECT_LE(max_abs_diff(base.logits.data(), dup.logits.data()), 1e-12);
  }
}

TEST(ProtoHead, InitialLossNearChance) {
  ProtoConfig c;  // default widths
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ProtoHead head(c, seed);
    std::mt19937_64 rng(seed + 7);
    Tensor s = random_tensor({25, 3, 12, 12}, rng, 0.0, 1.0);
    Tensor q = random_tensor({25, 3, 12, 12}, rng, 0.0, 1.0);
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < 25; ++i) labels.push_back(i % 5);
    NoGradGuard ng;
    const double loss = softmax_xent(head.forward(s, labels, 5, q).logits, labels).item();
    EXPECT_NEAR(loss, std::log(5.0), 0.1 * std::log(5.0)) << "seed " << seed;
  }
}

TEST(ProtoHead, MicroNetGradients) {
  ProtoHead head(micro_proto(), 4);
  std::mt19937_64 rng(4);
  Tensor s = random_tensor({4, 2, 4, 4}, rng, 0.0, 1.0, true);
  Tensor q = random_tensor({2, 2, 4, 4}, rng, 0.0, 1.0, true);
  std::vector<std::size_t> labels{0, 1, 1, 0};
  std::vector<std::size_t> qlabels{1, 0};
  NamedTensors wrt = head.parameters();
  wrt.emplace_back("support", s);
  wrt.emplace_back("query", q);
  auto r = check_gradients([&] { return softmax_xent(head.forward(s, labels, 2, q).logits, qlabels); }, wrt);
  EXPECT_LE(r.worst_rel_error, 1e-4) << r.worst_location;
}

// ---- optimizers ------------------------------------------------------------

TEST(Adam, ZeroGradientLeavesParameters) {
  Tensor p = Tensor({3}, {1.0, -2.0, 0.5}).set_requires_grad();
  Adam opt({{"p", p}});
  backward(sum_all(scale(p, 0.0)));
  opt.step();
  EXPECT_EQ(std::vector<double>(p.data().begin(), p.data().end()), (std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor p = Tensor({2}, {0.0, 0.0}).set_requires_grad();
  Adam opt({{"p", p}}, {.lr = 0.01});
  backward(sum_all(mul(p, Tensor({2}, {3.0, -0.5}))));
  opt.step();
  EXPECT_NEAR(p[0], -0.01, 1e-7);
  EXPECT_NEAR(p[1], 0.01, 1e-6);
}

TEST(Adam, MatchesScalarRecurrenceOnQuadratic) {
  // f(p) = 0.5 * a * (p - b)^2
  const double a = 1.7, b = 0.3, lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-5;
  Tensor p = Tensor({1}, {2.0}).set_requires_grad();
  Adam opt({{"p", p}}, {lr, b1, b2, eps});
  double ref = 2.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 5; ++t) {
    opt.zero_grad();
    Tensor d = add_scalar(p, -b);
    backward(scale(sum_all(mul(d, d)), 0.5 * a));
    opt.step();
    const double g = a * (ref - b);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    ref -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    EXPECT_NEAR(p[0], ref, 1e-12) << "step " << t;
  }
  EXPECT_EQ(opt.steps(), 5u);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  Tensor good = Tensor({1}, {1.0}).set_requires_grad();
  Tensor bad = Tensor({1}, {1.0}).set_requires_grad();
  Adam opt({{"good", good}, {"bad.weight", bad}});
  bad.impl()->grad_buffer()[0] = std::nan("");
  try {
    opt.step();
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.weight"), std::string::npos);
  }
  EXPECT_EQ(good[0], 1.0);
}

TEST(Sgd, MomentumRecurrence) {
  Tensor p = Tensor({1}, {1.0}).set_requires_grad();
  Sgd opt({{"p", p}}, {.lr = 0.1, .momentum = 0.5});
  double ref = 1.0, u = 0.0;
  for (int t = 0; t < 4; ++t) {
    opt.zero_grad();
    backward(sum_all(mul(p, p)));
    opt.step();
    u = 0.5 * u + 2.0 * ref;
    ref -= 0.1 * u;
    EXPECT_NEAR(p[0], ref, 1e-14);
  }
}
