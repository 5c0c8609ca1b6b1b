#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "chmffn/nn.hpp"
#include "chmffn/rng.hpp"
#include "chmffn/tensor.hpp"

namespace chmffn::attn {

// Sinusoidal table: PE[pos, 2i] = sin(pos / 10000^(2i/d)),
// PE[pos, 2i+1] = cos(pos / 10000^(2i/d)). d must be even.
Tensor positional_encoding(std::size_t seq_len, std::size_t d);

// Additive bias applied before the attention softmax at masked positions.
inline constexpr double kMaskBias = -1e9;

/// Boolean (queries x keys) mask; true entries are hidden from the query.
class AttentionMask {
 public:
  AttentionMask(std::size_t queries, std::size_t keys);
  // Query i may attend only to keys j <= i.
  static AttentionMask causal(std::size_t n);

  std::size_t queries() const { return queries_; }
  std::size_t keys() const { return keys_; }
  bool masked(std::size_t q, std::size_t k) const { return blocked_[q * keys_ + k] != 0; }
  void set(std::size_t q, std::size_t k, bool hidden) { blocked_[q * keys_ + k] = hidden ? 1 : 0; }

  // (queries, keys) tensor of 0 / kMaskBias.
  Tensor bias() const;

 private:
  std::size_t queries_, keys_;
  std::vector<unsigned char> blocked_;
};

// softmax(Q K^T / sqrt(dk) + mask_bias) V for Q (s,dk) or (n,s,dk), K (.., t,dk),
// V (.., t,dv). Throws when a mask row hides every key. When `weights` is
// non-null it receives the post-softmax attention matrix.
Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                    const AttentionMask* mask = nullptr,
                                    Tensor* weights = nullptr);

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t model_dim, std::size_t heads, Rng& rng);

  // Inputs are (s,d) or (b,s,d); keys and values share their length.
  Tensor forward(const Tensor& query, const Tensor& key, const Tensor& value,
                 const AttentionMask* mask = nullptr) const;
  void collect(const std::string& prefix, nn::ParamList& out) const;

  std::size_t heads() const { return heads_; }
  std::size_t model_dim() const { return model_dim_; }

  nn::Linear wq, wk, wv, wo;

 private:
  std::size_t model_dim_ = 0;
  std::size_t heads_ = 0;
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(std::size_t model_dim, std::size_t hidden_dim, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, nn::ParamList& out) const;

  nn::Linear fc1, fc2;
};

/// out = LN2(a + FFN(a)), a = LN1(x + MHSA(x)).
class EncoderLayer {
 public:
  EncoderLayer() = default;
  EncoderLayer(std::size_t model_dim, std::size_t heads, std::size_t ffn_dim, Rng& rng);

  Tensor forward(const Tensor& x_pos) const;
  void collect(const std::string& prefix, nn::ParamList& out) const;

  MultiHeadAttention mhsa;
  FeedForward ffn;
  nn::LayerNorm ln1, ln2;
};

/// x_m = LN1(x + MaskedMHSA(x))
/// x_c = LN2(x_m + MHA(query = x_m, key = value = enc_out))
/// out = LN3(x_c + FFN(x_c))
class DecoderLayer {
 public:
  DecoderLayer() = default;
  DecoderLayer(std::size_t model_dim, std::size_t heads, std::size_t ffn_dim, Rng& rng);

  // self_mask applies to the masked self-attention; nullptr disables masking.
  Tensor forward(const Tensor& dec_in, const Tensor& enc_out,
                 const AttentionMask* self_mask) const;
  void collect(const std::string& prefix, nn::ParamList& out) const;

  MultiHeadAttention masked_mhsa;
  MultiHeadAttention cross_mha;
  FeedForward ffn;
  nn::LayerNorm ln1, ln2, ln3;
};

}  // namespace chmffn::attn
