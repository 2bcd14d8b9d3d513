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
#include <optional>
#include <string>
#include <vector>

#include "normlab/layers.hpp"
#include "normlab/norm.hpp"

namespace normlab {

/// Which normalization each stage of a conditioned network uses.
///   AllBN:                       Batch everywhere (the conditional-BN baseline).
///   AllGN:                       Group everywhere.
///   GNWithBNStem:                Group in the conditioned blocks, Batch in the
///                                stem and the classifier.
///   GNWithBNStemNoClassifierNorm: as above, but the classifier's hidden
///                                layer is not normalized.
enum class NormVariant { AllGN, GNWithBNStem, GNWithBNStemNoClassifierNorm, AllBN };

std::string to_string(NormVariant v);
NormVariant norm_variant_from_string(const std::string& name);
std::vector<NormVariant> all_norm_variants();

struct VariantLayout {
  DomainKind stem;
  DomainKind blocks;
  std::optional<DomainKind> classifier;  // nullopt: no normalization
};

VariantLayout variant_layout(NormVariant v);

/// Statistics domain of `kind`; Group uses `groups`.
StatDomain make_domain(DomainKind kind, std::size_t groups);

/// Residual block conditioned through its normalization layer:
///   out = x + relu(cond_norm(conv_3x3(relu(conv_1x1([x, coords]))), c))
struct FilmBlock {
  Conv2dLayer conv_1x1;
  Conv2dLayer conv_3x3;
  NormLayer cond_norm;
  bool coord_maps = true;

  static FilmBlock create(std::size_t channels, std::size_t cond_dim, const StatDomain& domain, double eps,
                          bool coord_maps, std::mt19937_64& rng);
  Tensor forward(const Tensor& x, const Tensor& c);

  NamedTensors parameters() const;
  NamedTensors buffers() const;
};

struct StemLayer {
  Conv2dLayer conv;
  NormLayer norm;
  std::size_t patch = 1;  // space_to_depth block applied before the convolution
};

struct TrunkConfig {
  std::size_t in_channels = 1;
  std::size_t stem_channels = 32;
  std::size_t stem_layers = 2;
  std::size_t stem_patch = 7;
  std::size_t num_blocks = 4;
  std::size_t block_channels = 32;
  std::size_t cond_dim = 64;
  std::size_t groups = 4;
  double eps = 1e-5;
  bool coord_maps = true;
  DomainKind stem_domain = DomainKind::Group;
  DomainKind block_domain = DomainKind::Group;
};

/// Unconditioned stem followed by conditioned residual blocks. Stem layer 0
/// embeds each stem_patch x stem_patch patch with a 1x1 convolution over
/// space_to_depth; later stem layers are 3x3. The last stem layer outputs
/// block_channels.
class ConditionedTrunk {
 public:
  ConditionedTrunk() = default;
  ConditionedTrunk(const TrunkConfig& cfg, std::mt19937_64& rng);

  /// x[N, Cin, H, W], c[D] or [N, D] -> [N, block_channels, H / stem_patch, W / stem_patch]
  Tensor forward(const Tensor& x, const Tensor& c);

  void set_mode(NormMode mode);
  NamedTensors parameters() const;
  NamedTensors buffers() const;
  std::vector<NormLayerInfo> norm_layers() const;
  const TrunkConfig& config() const { return cfg_; }
  std::vector<FilmBlock>& blocks() { return blocks_; }

 private:
  TrunkConfig cfg_;
  std::vector<StemLayer> stem_;
  std::vector<FilmBlock> blocks_;
};

struct FilmConfig {
  std::size_t in_channels = 1;
  std::size_t stem_channels = 32;
  std::size_t stem_layers = 2;
  std::size_t stem_patch = 7;
  std::size_t num_blocks = 4;
  std::size_t block_channels = 32;
  std::size_t classifier_channels = 64;
  std::size_t fc_hidden = 64;
  std::size_t num_answers = 2;
  std::size_t vocab = 14;
  std::size_t embed_dim = 32;
  std::size_t gru_hidden = 64;
  std::size_t groups = 4;
  double eps = 1e-5;
  bool coord_maps = true;
  NormVariant variant = NormVariant::AllBN;
};

/// Visual question answering network: GRU question encoder, conditioned
/// trunk, and a classifier of 1x1 convolution, global max pooling, a hidden
/// fully connected layer (optionally normalized) and the answer layer.
class FilmNetwork {
 public:
  FilmNetwork() = default;
  FilmNetwork(const FilmConfig& cfg, std::uint64_t seed);

  /// images[N, Cin, H, W]; one token sequence per image. Returns logits
  /// [N, num_answers]; softmax is left to the loss.
  Tensor forward(const Tensor& images, const std::vector<std::vector<std::size_t>>& questions);

  void set_mode(NormMode mode);
  NamedTensors parameters() const;
  NamedTensors buffers() const;
  std::vector<NormLayerInfo> norm_layers() const;
  const FilmConfig& config() const { return cfg_; }

  GruEncoder& gru() { return gru_; }
  ConditionedTrunk& trunk() { return trunk_; }

 private:
  FilmConfig cfg_;
  GruEncoder gru_;
  ConditionedTrunk trunk_;
  Conv2dLayer classifier_conv_;
  LinearLayer fc_hidden_;
  std::optional<NormLayer> fc_norm_;
  LinearLayer fc_out_;
};

}  // namespace normlab
