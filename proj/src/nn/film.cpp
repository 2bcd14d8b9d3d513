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
#include "normlab/film.hpp"

#include "normlab/ops.hpp"

namespace normlab {

std::string to_string(NormVariant v) {
  switch (v) {
    case NormVariant::AllGN:
      return "all_gn";
    case NormVariant::GNWithBNStem:
      return "gn_bn_stem";
    case NormVariant::GNWithBNStemNoClassifierNorm:
      return "gn_bn_stem_noclf";
    case NormVariant::AllBN:
      return "all_bn";
  }
  return "?";
}

std::vector<NormVariant> all_norm_variants() {
  return {NormVariant::AllGN, NormVariant::GNWithBNStem, NormVariant::GNWithBNStemNoClassifierNorm,
          NormVariant::AllBN};
}

NormVariant norm_variant_from_string(const std::string& name) {
  for (NormVariant v : all_norm_variants()) {
    if (to_string(v) == name) return v;
  }
  throw ConfigError("unknown norm variant '" + name + "' (expected all_gn, gn_bn_stem, gn_bn_stem_noclf, all_bn)");
}

VariantLayout variant_layout(NormVariant v) {
  switch (v) {
    case NormVariant::AllGN:
      return {DomainKind::Group, DomainKind::Group, DomainKind::Group};
    case NormVariant::GNWithBNStem:
      return {DomainKind::Batch, DomainKind::Group, DomainKind::Batch};
    case NormVariant::GNWithBNStemNoClassifierNorm:
      return {DomainKind::Batch, DomainKind::Group, std::nullopt};
    case NormVariant::AllBN:
      return {DomainKind::Batch, DomainKind::Batch, DomainKind::Batch};
  }
  throw ConfigError("bad norm variant");
}

StatDomain make_domain(DomainKind kind, std::size_t groups) {
  return kind == DomainKind::Group ? StatDomain::group(groups) : StatDomain{kind, 0};
}

namespace {

Tensor with_coords(const Tensor& x, bool enabled) {
  if (!enabled) return x;
  return concat({x, coordinate_maps(x.dim(0), x.dim(2), x.dim(3))}, 1);
}

NormLayerInfo info(const std::string& name, const NormLayer& layer) {
  return {name, layer.domain().kind, layer.affine_kind()};
}

}  // namespace

FilmBlock FilmBlock::create(std::size_t channels, std::size_t cond_dim, const StatDomain& domain, double eps,
                            bool coord_maps, std::mt19937_64& rng) {
  FilmBlock b;
  b.coord_maps = coord_maps;
  b.conv_1x1 = Conv2dLayer::create(channels + (coord_maps ? 2 : 0), channels, 1, rng);
  b.conv_3x3 = Conv2dLayer::create(channels, channels, 3, rng);
  NormLayerOptions o;
  o.domain = domain;
  o.channels = channels;
  o.eps = eps;
  o.affine = AffineKind::Conditional;
  o.cond_dim = cond_dim;
  b.cond_norm = NormLayer(o);
  return b;
}

Tensor FilmBlock::forward(const Tensor& x, const Tensor& c) {
  if (x.rank() != 4 || x.dim(1) != cond_norm.channels()) {
    throw ShapeError("film block expects [N," + std::to_string(cond_norm.channels()) + ",H,W], got " +
                     shape_str(x.shape()));
  }
  Tensor h = relu(conv_1x1.forward(with_coords(x, coord_maps)));
  h = relu(cond_norm.forward(conv_3x3.forward(h), c));
  return add(x, h);
}

NamedTensors FilmBlock::parameters() const {
  NamedTensors out;
  append_prefixed(out, "conv_1x1", conv_1x1.parameters());
  append_prefixed(out, "conv_3x3", conv_3x3.parameters());
  append_prefixed(out, "cond_norm", cond_norm.parameters());
  return out;
}

NamedTensors FilmBlock::buffers() const {
  NamedTensors out;
  append_prefixed(out, "cond_norm", cond_norm.buffers());
  return out;
}

ConditionedTrunk::ConditionedTrunk(const TrunkConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  if (cfg.stem_layers == 0) throw ConfigError("stem needs at least one layer");
  if (cfg.stem_patch == 0) throw ConfigError("stem_patch must be positive");
  for (std::size_t i = 0; i < cfg.stem_layers; ++i) {
    const std::size_t in = i == 0 ? cfg.in_channels : cfg.stem_channels;
    const std::size_t out = i + 1 == cfg.stem_layers ? cfg.block_channels : cfg.stem_channels;
    NormLayerOptions o;
    o.domain = make_domain(cfg.stem_domain, cfg.groups);
    o.channels = out;
    o.eps = cfg.eps;
    o.affine = AffineKind::Fixed;
    const std::size_t patch = i == 0 ? cfg.stem_patch : 1;
    const std::size_t k = i == 0 ? 1 : 3;
    stem_.push_back({Conv2dLayer::create(in * patch * patch, out, k, rng), NormLayer(o), patch});
  }
  for (std::size_t i = 0; i < cfg.num_blocks; ++i) {
    blocks_.push_back(FilmBlock::create(cfg.block_channels, cfg.cond_dim, make_domain(cfg.block_domain, cfg.groups),
                                        cfg.eps, cfg.coord_maps, rng));
  }
}

Tensor ConditionedTrunk::forward(const Tensor& x, const Tensor& c) {
  Tensor h = x;
  for (auto& layer : stem_) {
    if (layer.patch > 1) h = space_to_depth(h, layer.patch);
    h = relu(layer.norm.forward(layer.conv.forward(h)));
  }
  for (auto& block : blocks_) h = block.forward(h, c);
  return h;
}

void ConditionedTrunk::set_mode(NormMode mode) {
  for (auto& layer : stem_) layer.norm.set_mode(mode);
  for (auto& block : blocks_) block.cond_norm.set_mode(mode);
}

NamedTensors ConditionedTrunk::parameters() const {
  NamedTensors out;
  for (std::size_t i = 0; i < stem_.size(); ++i) {
    const std::string p = "stem." + std::to_string(i);
    append_prefixed(out, p + ".conv", stem_[i].conv.parameters());
    append_prefixed(out, p + ".norm", stem_[i].norm.parameters());
  }
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    append_prefixed(out, "block." + std::to_string(i), blocks_[i].parameters());
  }
  return out;
}

NamedTensors ConditionedTrunk::buffers() const {
  NamedTensors out;
  for (std::size_t i = 0; i < stem_.size(); ++i) {
    append_prefixed(out, "stem." + std::to_string(i) + ".norm", stem_[i].norm.buffers());
  }
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    append_prefixed(out, "block." + std::to_string(i), blocks_[i].buffers());
  }
  return out;
}

std::vector<NormLayerInfo> ConditionedTrunk::norm_layers() const {
  std::vector<NormLayerInfo> out;
  for (std::size_t i = 0; i < stem_.size(); ++i) out.push_back(info("stem." + std::to_string(i), stem_[i].norm));
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    out.push_back(info("block." + std::to_string(i), blocks_[i].cond_norm));
  }
  return out;
}

FilmNetwork::FilmNetwork(const FilmConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  std::mt19937_64 rng(seed);
  const VariantLayout layout = variant_layout(cfg.variant);
  gru_ = GruEncoder::create(cfg.vocab, cfg.embed_dim, cfg.gru_hidden, rng);
  TrunkConfig t;
  t.in_channels = cfg.in_channels;
  t.stem_channels = cfg.stem_channels;
  t.stem_layers = cfg.stem_layers;
  t.stem_patch = cfg.stem_patch;
  t.num_blocks = cfg.num_blocks;
  t.block_channels = cfg.block_channels;
  t.cond_dim = cfg.gru_hidden;
  t.groups = cfg.groups;
  t.eps = cfg.eps;
  t.coord_maps = cfg.coord_maps;
  t.stem_domain = layout.stem;
  t.block_domain = layout.blocks;
  trunk_ = ConditionedTrunk(t, rng);
  classifier_conv_ =
      Conv2dLayer::create(cfg.block_channels + (cfg.coord_maps ? 2 : 0), cfg.classifier_channels, 1, rng);
  fc_hidden_ = LinearLayer::create(cfg.classifier_channels, cfg.fc_hidden, rng);
  if (layout.classifier) {
    NormLayerOptions o;
    o.domain = make_domain(*layout.classifier, cfg.groups);
    o.channels = cfg.fc_hidden;
    o.eps = cfg.eps;
    o.affine = AffineKind::Fixed;
    fc_norm_ = NormLayer(o);
  }
  fc_out_ = LinearLayer::create(cfg.fc_hidden, cfg.num_answers, rng, 0.1);
}

Tensor FilmNetwork::forward(const Tensor& images, const std::vector<std::vector<std::size_t>>& questions) {
  if (images.rank() != 4) throw ShapeError("film network expects images [N,C,H,W], got " + shape_str(images.shape()));
  if (questions.size() != images.dim(0)) {
    throw ShapeError("film network: " + std::to_string(images.dim(0)) + " images but " +
                     std::to_string(questions.size()) + " questions");
  }
  const std::size_t n = images.dim(0);
  Tensor c = gru_.encode_batch(questions);
  Tensor h = trunk_.forward(images, c);
  h = relu(classifier_conv_.forward(with_coords(h, cfg_.coord_maps)));
  h = reshape(max(h, {2, 3}), {n, cfg_.classifier_channels});
  h = fc_hidden_.forward(h);
  if (fc_norm_) h = fc_norm_->forward(h);
  return fc_out_.forward(relu(h));
}

void FilmNetwork::set_mode(NormMode mode) {
  trunk_.set_mode(mode);
  if (fc_norm_) fc_norm_->set_mode(mode);
}

NamedTensors FilmNetwork::parameters() const {
  NamedTensors out;
  append_prefixed(out, "gru", gru_.parameters());
  append_prefixed(out, "trunk", trunk_.parameters());
  append_prefixed(out, "classifier.conv", classifier_conv_.parameters());
  append_prefixed(out, "classifier.fc_hidden", fc_hidden_.parameters());
  if (fc_norm_) append_prefixed(out, "classifier.norm", fc_norm_->parameters());
  append_prefixed(out, "classifier.fc_out", fc_out_.parameters());
  return out;
}

NamedTensors FilmNetwork::buffers() const {
  NamedTensors out;
  append_prefixed(out, "trunk", trunk_.buffers());
  if (fc_norm_) append_prefixed(out, "classifier.norm", fc_norm_->buffers());
  return out;
}

std::vector<NormLayerInfo> FilmNetwork::norm_layers() const {
  std::vector<NormLayerInfo> out;
  for (auto& i : trunk_.norm_layers()) out.push_back({"trunk." + i.name, i.domain, i.affine});
  if (fc_norm_) out.push_back(info("classifier.norm", *fc_norm_));
  return out;
}

}  // namespace normlab
