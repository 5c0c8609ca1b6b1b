#include "chmffn/attention.hpp"

#include <cmath>

#include "chmffn/error.hpp"
#include "chmffn/ops.hpp"

namespace chmffn::attn {

Tensor positional_encoding(std::size_t seq_len, std::size_t d) {
  if (d == 0 || d % 2 != 0) {
    throw ConfigError("positional encoding needs an even model dimension, got " +
                      std::to_string(d));
  }
  Tensor pe({seq_len, d});
  for (std::size_t pos = 0; pos < seq_len; ++pos) {
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double freq = std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) / freq;
      pe[pos * d + 2 * i] = std::sin(angle);
      pe[pos * d + 2 * i + 1] = std::cos(angle);
    }
  }
  return pe;
}

AttentionMask::AttentionMask(std::size_t queries, std::size_t keys)
    : queries_(queries), keys_(keys), blocked_(queries * keys, 0) {}

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) m.set(i, j, true);
  }
  return m;
}

Tensor AttentionMask::bias() const {
  Tensor b({queries_, keys_});
  for (std::size_t i = 0; i < blocked_.size(); ++i) b[i] = blocked_[i] ? kMaskBias : 0.0;
  return b;
}

Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                    const AttentionMask* mask, Tensor* weights) {
  if (q.rank() != k.rank() || q.rank() != v.rank() || (q.rank() != 2 && q.rank() != 3)) {
    throw ShapeError("attention expects Q, K, V of equal rank 2 or 3");
  }
  const std::size_t r = q.rank();
  const std::size_t dk = q.dim(r - 1);
  const std::size_t s = q.dim(r - 2);
  const std::size_t t = k.dim(r - 2);
  if (k.dim(r - 1) != dk || v.dim(r - 2) != t) {
    throw ShapeError("attention dimension mismatch: Q " + shape_str(q.shape()) + ", K " +
                     shape_str(k.shape()) + ", V " + shape_str(v.shape()));
  }
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dk)));
  if (mask != nullptr) {
    if (mask->queries() != s || mask->keys() != t) {
      throw ShapeError("attention mask shape does not match (queries, keys)");
    }
    for (std::size_t i = 0; i < s; ++i) {
      bool any_open = false;
      for (std::size_t j = 0; j < t && !any_open; ++j) any_open = !mask->masked(i, j);
      if (!any_open) {
        throw ShapeError("attention mask hides every key for query " + std::to_string(i));
      }
    }
    scores = add(scores, mask->bias());
  }
  Tensor w = nn::softmax(scores, r - 1);
  if (weights != nullptr) *weights = w;
  return matmul(w, v);
}

MultiHeadAttention::MultiHeadAttention(std::size_t model_dim, std::size_t heads, Rng& rng)
    : model_dim_(model_dim), heads_(heads) {
  if (heads == 0 || model_dim % heads != 0) {
    throw ConfigError("model dimension " + std::to_string(model_dim) +
                      " is not divisible by head count " + std::to_string(heads));
  }
  wq = nn::Linear(model_dim, model_dim, rng);
  wk = nn::Linear(model_dim, model_dim, rng);
  wv = nn::Linear(model_dim, model_dim, rng);
  wo = nn::Linear(model_dim, model_dim, rng);
}

namespace {

// (b,s,d) -> (b*H, s, d/H)
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t b = x.dim(0), s = x.dim(1), d = x.dim(2);
  if (heads == 1) return x;
  Tensor t = reshape(x, {b, s, heads, d / heads});
  t = permute(t, {0, 2, 1, 3});
  return reshape(t, {b * heads, s, d / heads});
}

// (b*H, s, dh) -> (b, s, H*dh)
Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t heads) {
  if (heads == 1) return x;
  const std::size_t s = x.dim(1), dh = x.dim(2);
  Tensor t = reshape(x, {batch, heads, s, dh});
  t = permute(t, {0, 2, 1, 3});
  return reshape(t, {batch, s, heads * dh});
}

Tensor as_batched(const Tensor& x) {
  return x.rank() == 2 ? reshape(x, {1, x.dim(0), x.dim(1)}) : x;
}

}  // namespace

Tensor MultiHeadAttention::forward(const Tensor& query, const Tensor& key, const Tensor& value,
                                   const AttentionMask* mask) const {
  for (const Tensor* t : {&query, &key, &value}) {
    if ((t->rank() != 2 && t->rank() != 3) || t->shape().back() != model_dim_) {
      throw ShapeError("multi-head attention input " + shape_str(t->shape()) +
                       " does not end in model dimension " + std::to_string(model_dim_));
    }
  }
  const bool unbatched = query.rank() == 2;
  const Tensor q_in = as_batched(query), k_in = as_batched(key), v_in = as_batched(value);
  const std::size_t b = q_in.dim(0);
  if (k_in.dim(0) != b || v_in.dim(0) != b || k_in.dim(1) != v_in.dim(1)) {
    throw ShapeError("multi-head attention batch or key/value length mismatch");
  }
  const Tensor q = split_heads(wq.forward(q_in), heads_);
  const Tensor k = split_heads(wk.forward(k_in), heads_);
  const Tensor v = split_heads(wv.forward(v_in), heads_);
  Tensor out = wo.forward(merge_heads(scaled_dot_product_attention(q, k, v, mask), b, heads_));
  if (unbatched) out = reshape(out, {out.dim(1), out.dim(2)});
  return out;
}

void MultiHeadAttention::collect(const std::string& prefix, nn::ParamList& out) const {
  wq.collect(prefix + ".wq", out);
  wk.collect(prefix + ".wk", out);
  wv.collect(prefix + ".wv", out);
  wo.collect(prefix + ".wo", out);
}

FeedForward::FeedForward(std::size_t model_dim, std::size_t hidden_dim, Rng& rng)
    : fc1(model_dim, hidden_dim, rng), fc2(hidden_dim, model_dim, rng) {}

Tensor FeedForward::forward(const Tensor& x) const {
  return fc2.forward(nn::relu(fc1.forward(x)));
}

void FeedForward::collect(const std::string& prefix, nn::ParamList& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

EncoderLayer::EncoderLayer(std::size_t model_dim, std::size_t heads, std::size_t ffn_dim, Rng& rng)
    : mhsa(model_dim, heads, rng), ffn(model_dim, ffn_dim, rng), ln1(model_dim), ln2(model_dim) {}

Tensor EncoderLayer::forward(const Tensor& x_pos) const {
  const Tensor a = ln1.forward(add(x_pos, mhsa.forward(x_pos, x_pos, x_pos)));
  return ln2.forward(add(a, ffn.forward(a)));
}

void EncoderLayer::collect(const std::string& prefix, nn::ParamList& out) const {
  mhsa.collect(prefix + ".mhsa", out);
  ffn.collect(prefix + ".ffn", out);
  ln1.collect(prefix + ".ln1", out);
  ln2.collect(prefix + ".ln2", out);
}

DecoderLayer::DecoderLayer(std::size_t model_dim, std::size_t heads, std::size_t ffn_dim, Rng& rng)
    : masked_mhsa(model_dim, heads, rng),
      cross_mha(model_dim, heads, rng),
      ffn(model_dim, ffn_dim, rng),
      ln1(model_dim),
      ln2(model_dim),
      ln3(model_dim) {}

Tensor DecoderLayer::forward(const Tensor& dec_in, const Tensor& enc_out,
                             const AttentionMask* self_mask) const {
  const std::size_t s = dec_in.dim(dec_in.rank() - 2);
  if (self_mask != nullptr && (self_mask->queries() != s || self_mask->keys() != s)) {
    throw ShapeError("decoder mask length does not match decoder input length " +
                     std::to_string(s));
  }
  const Tensor x_m = ln1.forward(add(dec_in, masked_mhsa.forward(dec_in, dec_in, dec_in, self_mask)));
  const Tensor x_c = ln2.forward(add(x_m, cross_mha.forward(x_m, enc_out, enc_out)));
  return ln3.forward(add(x_c, ffn.forward(x_c)));
}

void DecoderLayer::collect(const std::string& prefix, nn::ParamList& out) const {
  masked_mhsa.collect(prefix + ".masked_mhsa", out);
  cross_mha.collect(prefix + ".cross_mha", out);
  ffn.collect(prefix + ".ffn", out);
  ln1.collect(prefix + ".ln1", out);
  ln2.collect(prefix + ".ln2", out);
  ln3.collect(prefix + ".ln3", out);
}

}  // namespace chmffn::attn
