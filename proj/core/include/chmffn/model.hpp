#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "chmffn/attention.hpp"
#include "chmffn/nn.hpp"
#include "chmffn/tensor.hpp"

namespace chmffn {

enum class DiffMode { signed_diff, absolute };

std::string to_string(DiffMode mode);
DiffMode diff_mode_from_string(const std::string& s);

struct ModelConfig {
  std::size_t bands = 0;
  std::size_t patch = 9;
  std::size_t base_channels = 32;
  std::size_t heads = 4;
  std::size_t enc_layers = 1;
  std::size_t dec_layers = 1;
  // FFN hidden width is ffn_mult * model_dim.
  std::size_t ffn_mult = 2;
  // Bottleneck ratio of the DCCSA shared MLP and the AFAF squeeze.
  std::size_t reduction = 8;
  bool causal_mask = true;
  bool use_msc = true;
  bool use_dccsa = true;
  bool use_stcfl = true;
  bool use_afaf = true;
  DiffMode diff_mode = DiffMode::signed_diff;
  std::uint64_t seed = 0;

  // 3 * base_channels with the multiscale concat, base_channels without.
  std::size_t model_dim() const { return use_msc ? 3 * base_channels : base_channels; }
  std::size_t tokens() const { return patch * patch; }
  // Throws ConfigError.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

// (b,S,d) tokens <-> (b,d,P,P) maps, tokens in row-major pixel order.
Tensor tokens_to_map(const Tensor& tokens, std::size_t patch);
Tensor map_to_tokens(const Tensor& map);

/// Mish(BN2(Conv2(Mish(BN1(Conv1(x))))) + BN_skip(Conv1x1(x))).
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(std::size_t in_channels, std::size_t out_channels, Rng& rng);
  Tensor forward(const Tensor& x, nn::Mode mode) const;
  void collect(const std::string& prefix, nn::ParamList& out) const;

  nn::Conv2d conv1, conv2, skip;
  nn::BatchNorm bn1, bn2, bn_skip;
};

/// Parallel 3x3/5x5/7x7 conv + BN + Mish branches, concatenated along
/// channels, flattened to tokens, plus the positional table. With a single
/// branch (multiscale disabled) only the 3x3 branch is built.
class MultiscaleEmbed {
 public:
  MultiscaleEmbed() = default;
  MultiscaleEmbed(std::size_t channels, bool multiscale, std::size_t patch, Rng& rng);
  // (b,C,P,P) -> (b,P*P,d)
  Tensor forward(const Tensor& x, nn::Mode mode) const;
  void collect(const std::string& prefix, nn::ParamList& out) const;

  std::vector<nn::Conv2d> convs;
  std::vector<nn::BatchNorm> bns;
  Tensor pe;
};

/// Dual-core channel-spatial attention.
class Dccsa {
 public:
  Dccsa() = default;
  Dccsa(std::size_t channels, std::size_t reduction, Rng& rng);

  // F * sigmoid(MLP(maxpool(Fconv)) + MLP(avgpool(Fconv))), Fconv = C3(F) + C5(F).
  Tensor channel(const Tensor& f) const;
  // Conv3x3(Concat(skip, Fc * sigmoid(C3(pool) + C5(pool)))), pool = channelwise_pool(Fc).
  Tensor spatial(const Tensor& fc, const Tensor& skip) const;
  Tensor forward(const Tensor& f, const Tensor& skip) const { return spatial(channel(f), skip); }
  void collect(const std::string& prefix, nn::ParamList& out) const;

  nn::Conv2d ch_conv3, ch_conv5, mlp_reduce, mlp_expand;
  nn::Conv2d sp_conv3, sp_conv5, fuse;
};

struct SubnetworkFeatures {
  Tensor rf;  // (b,C,P,P)
  Tensor ef;  // (b,d,P,P)
  Tensor df;  // (b,d,P,P)
};

class Subnetwork {
 public:
  Subnetwork() = default;
  Subnetwork(const ModelConfig& cfg, Rng& rng);
  SubnetworkFeatures forward(const Tensor& patch, nn::Mode mode) const;
  void collect(const std::string& prefix, nn::ParamList& out) const;

  ResidualBlock residual;
  MultiscaleEmbed embed;
  std::vector<attn::EncoderLayer> encoders;
  // Decoder-input embedding of RF to the model dimension.
  nn::Conv2d dec_embed;
  std::optional<Dccsa> dccsa;
  std::vector<attn::DecoderLayer> decoders;
  std::optional<attn::AttentionMask> causal;

 private:
  std::size_t patch_ = 0;
};

struct StcflOutputs {
  Tensor o1;  // (b,c,h,w)
  Tensor o2;  // (b,2c,h,w)
  Tensor o3;  // (b,c,h,w)
};

/// Spectral-temporal change feature learning over the three level-wise
/// difference features.
class Stcfl {
 public:
  Stcfl() = default;
  Stcfl(std::size_t channels, Rng& rng);
  StcflOutputs forward(const Tensor& f1, const Tensor& f2, const Tensor& f3, nn::Mode mode) const;
  void collect(const std::string& prefix, nn::ParamList& out) const;

  nn::Conv2d c1, c2, c3;
  nn::BatchNorm b1, b2, b3;
  nn::Conv2d conv_x1, conv_x2;
  nn::BatchNorm bn_x1, bn_x2;
  // 1x1, 2c -> c: brings Concat(X1, X2) to the width of O1 and O3.
  nn::Conv2d proj;
};

/// Adaptive fusion: F = C3(Fs1) + Fs2 + C3(Fs3); W = sigmoid(1x1(ReLU(BN(1x1(GAP(F))))));
/// output Concat(C3(Fs1)*W, Fs2*W, C3(Fs3)*W).
class Afaf {
 public:
  Afaf() = default;
  Afaf(std::size_t channels, std::size_t reduction, Rng& rng);
  Tensor forward(const Tensor& s1, const Tensor& s2, const Tensor& s3, nn::Mode mode,
                 Tensor* weights = nullptr) const;
  void collect(const std::string& prefix, nn::ParamList& out) const;

  nn::Conv2d conv_s1, conv_s3;
  nn::Conv2d squeeze, excite;
  nn::BatchNorm bn;
};

/// Conv5x5 -> GAP -> Linear -> ReLU -> Linear(2) -> softmax.
class ClassifierHead {
 public:
  ClassifierHead() = default;
  ClassifierHead(std::size_t in_channels, std::size_t channels, Rng& rng);
  Tensor forward(const Tensor& fused) const;
  void collect(const std::string& prefix, nn::ParamList& out) const;

  nn::Conv2d conv;
  nn::Linear fc1, fc2;
};

// Intermediates of one bi-temporal forward pass.
struct PairTrace {
  SubnetworkFeatures t1, t2;
  Tensor f1, f2, f3;
  StcflOutputs stcfl;
  Tensor fused;
  Tensor probs;  // (b,2): P(unchanged), P(changed)
};

class ChmffnModel {
 public:
  explicit ChmffnModel(const ModelConfig& cfg);
  ChmffnModel(ChmffnModel&&) = default;
  ChmffnModel& operator=(ChmffnModel&&) = default;
  ChmffnModel(const ChmffnModel&) = delete;
  ChmffnModel& operator=(const ChmffnModel&) = delete;

  const ModelConfig& config() const { return cfg_; }

  SubnetworkFeatures subnetwork_forward(const Tensor& patch, nn::Mode mode) const;
  PairTrace forward_trace(const Tensor& p1, const Tensor& p2, nn::Mode mode) const;
  Tensor forward_pair(const Tensor& p1, const Tensor& p2, nn::Mode mode) const {
    return forward_trace(p1, p2, mode).probs;
  }

  // Every named tensor in a fixed order: trainable parameters and buffers.
  nn::ParamList named_tensors() const;
  std::vector<Tensor> parameters() const;

  Subnetwork subnet;
  // 1x1, C -> d, no bias: keeps signed differences odd under input swap.
  nn::Conv2d rf_proj;
  std::optional<Stcfl> stcfl;
  std::optional<Afaf> afaf;
  ClassifierHead head;

 private:
  Tensor level_diff(const Tensor& later, const Tensor& earlier) const;

  ModelConfig cfg_;
};

// Mean binary cross-entropy on the "changed" column of (b,2) probabilities,
// clamped to [1e-12, 1 - 1e-12] before the log.
Tensor bce_loss(const Tensor& probs, const std::vector<int>& labels);

}  // namespace chmffn
