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
#include "normlab/layers.hpp"

#include <cmath>

#include "normlab/ops.hpp"

namespace normlab {

void append_prefixed(NamedTensors& out, const std::string& prefix, const NamedTensors& items) {
  for (const auto& [name, t] : items) out.emplace_back(prefix + "." + name, t);
}

Tensor he_normal(const Shape& shape, std::size_t fan_in, std::mt19937_64& rng, double gain) {
  std::normal_distribution<double> dist(0.0, gain * std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = dist(rng);
  Tensor t(shape, std::move(d));
  t.set_requires_grad();
  return t;
}

Conv2dLayer Conv2dLayer::create(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                                std::mt19937_64& rng) {
  Conv2dLayer c;
  c.weight = he_normal({out_channels, in_channels, kernel, kernel}, in_channels * kernel * kernel, rng);
  c.bias = Tensor::zeros({out_channels}).set_requires_grad();
  c.padding = kernel / 2;
  return c;
}

Tensor Conv2dLayer::forward(const Tensor& x) const { return conv2d(x, weight, bias, padding); }

LinearLayer LinearLayer::create(std::size_t in_features, std::size_t out_features, std::mt19937_64& rng,
                                double gain) {
  return LinearLayer{he_normal({out_features, in_features}, in_features, rng, gain),
                     Tensor::zeros({out_features}).set_requires_grad()};
}

Tensor LinearLayer::forward(const Tensor& x) const { return linear(x, weight, bias); }

Tensor coordinate_maps(std::size_t n, std::size_t h, std::size_t w) {
  auto coord = [](std::size_t i, std::size_t extent) {
    return extent == 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(extent - 1);
  };
  std::vector<double> d(n * 2 * h * w);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        d[((s * 2 + 0) * h + i) * w + j] = coord(i, h);
        d[((s * 2 + 1) * h + i) * w + j] = coord(j, w);
      }
  return Tensor({n, 2, h, w}, std::move(d));
}

GruEncoder GruEncoder::create(std::size_t vocab, std::size_t embed_dim, std::size_t hidden, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  std::uniform_real_distribution<double> u(-bound, bound);
  auto uniform = [&](const Shape& s) {
    std::vector<double> d(shape_numel(s));
    for (auto& v : d) v = u(rng);
    Tensor t(s, std::move(d));
    t.set_requires_grad();
    return t;
  };
  GruEncoder g;
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> emb(vocab * embed_dim);
  for (auto& v : emb) v = nd(rng);
  g.embedding = Tensor({vocab, embed_dim}, std::move(emb)).set_requires_grad();
  g.w_z = uniform({hidden, embed_dim});
  g.u_z = uniform({hidden, hidden});
  g.b_z = uniform({hidden});
  g.w_r = uniform({hidden, embed_dim});
  g.u_r = uniform({hidden, hidden});
  g.b_r = uniform({hidden});
  g.w_h = uniform({hidden, embed_dim});
  g.u_h = uniform({hidden, hidden});
  g.b_h = uniform({hidden});
  return g;
}

Tensor GruEncoder::encode(std::span<const std::size_t> tokens) const {
  if (tokens.empty()) return Tensor::zeros({hidden()});
  return reshape(encode_batch({std::vector<std::size_t>(tokens.begin(), tokens.end())}), {hidden()});
}

Tensor GruEncoder::encode_batch(const std::vector<std::vector<std::size_t>>& sequences) const {
  if (sequences.empty()) throw ShapeError("gru: empty batch");
  const std::size_t T = sequences.front().size();
  for (const auto& s : sequences) {
    if (s.size() != T) throw ShapeError("gru: batched sequences must share one length");
  }
  const std::size_t N = sequences.size(), H = hidden();
  Tensor h = Tensor::zeros({N, H});
  std::vector<std::size_t> step_tokens(N);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t n = 0; n < N; ++n) step_tokens[n] = sequences[n][t];
    Tensor x = normlab::embedding(embedding, step_tokens);
    Tensor z = sigmoid(add(linear(x, w_z, b_z), linear(h, u_z, Tensor())));
    Tensor r = sigmoid(add(linear(x, w_r, b_r), linear(h, u_r, Tensor())));
    Tensor cand = tanh(add(linear(x, w_h, b_h), linear(mul(r, h), u_h, Tensor())));
    h = add(h, mul(z, sub(cand, h)));
  }
  return h;
}

NamedTensors GruEncoder::parameters() const {
  return {{"embedding", embedding}, {"w_z", w_z}, {"u_z", u_z}, {"b_z", b_z}, {"w_r", w_r},
          {"u_r", u_r},             {"b_r", b_r}, {"w_h", w_h}, {"u_h", u_h}, {"b_h", b_h}};
}

}  // namespace normlab
