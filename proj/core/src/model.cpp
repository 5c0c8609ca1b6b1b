#include "chmffn/model.hpp"

#include <algorithm>
#include <cmath>

#include "chmffn/error.hpp"
#include "chmffn/ops.hpp"
#include "record.hpp"

namespace chmffn {

using nn::Mode;

std::string to_string(DiffMode mode) {
  return mode == DiffMode::signed_diff ? "signed" : "absolute";
}

DiffMode diff_mode_from_string(const std::string& s) {
  if (s == "signed") return DiffMode::signed_diff;
  if (s == "absolute") return DiffMode::absolute;
  throw ConfigError("unknown diff_mode '" + s + "' (expected signed|absolute)");
}

void ModelConfig::validate() const {
  if (bands == 0) throw ConfigError("bands must be positive");
  if (patch == 0 || patch % 2 == 0) throw ConfigError("patch size must be odd and positive");
  if (base_channels == 0 || heads == 0 || ffn_mult == 0 || reduction == 0) {
    throw ConfigError("channel, head, ffn and reduction counts must be positive");
  }
  if (enc_layers == 0 || dec_layers == 0) throw ConfigError("layer counts must be positive");
  const std::size_t d = model_dim();
  if (d % 2 != 0) throw ConfigError("model dimension must be even for positional encoding");
  if (d % heads != 0) throw ConfigError("model dimension must be divisible by heads");
  if (use_dccsa && d < reduction) {
    throw ConfigError("DCCSA channel count " + std::to_string(d) + " is below the reduction ratio " +
                      std::to_string(reduction));
  }
  if (use_afaf && 2 * d < reduction) {
    throw ConfigError("AFAF channel count is below the reduction ratio");
  }
}

Tensor tokens_to_map(const Tensor& tokens, std::size_t patch) {
  if (tokens.rank() != 3 || tokens.dim(1) != patch * patch) {
    throw ShapeError("tokens_to_map expects (b, P*P, d), got " + shape_str(tokens.shape()));
  }
  const std::size_t b = tokens.dim(0), d = tokens.dim(2);
  return reshape(permute(tokens, {0, 2, 1}), {b, d, patch, patch});
}

Tensor map_to_tokens(const Tensor& map) {
  if (map.rank() != 4) throw ShapeError("map_to_tokens expects (b,d,h,w)");
  const std::size_t b = map.dim(0), d = map.dim(1), s = map.dim(2) * map.dim(3);
  return permute(reshape(map, {b, d, s}), {0, 2, 1});
}

// ---------------------------------------------------------------------------

ResidualBlock::ResidualBlock(std::size_t in_channels, std::size_t out_channels, Rng& rng)
    : conv1(in_channels, out_channels, 3, rng),
      conv2(out_channels, out_channels, 3, rng),
      skip(in_channels, out_channels, 1, rng),
      bn1(out_channels),
      bn2(out_channels),
      bn_skip(out_channels) {}

Tensor ResidualBlock::forward(const Tensor& x, Mode mode) const {
  const Tensor h = nn::mish(bn1.forward(conv1.forward(x), mode));
  const Tensor main = bn2.forward(conv2.forward(h), mode);
  return nn::mish(add(main, bn_skip.forward(skip.forward(x), mode)));
}

void ResidualBlock::collect(const std::string& prefix, nn::ParamList& out) const {
  conv1.collect(prefix + ".conv1", out);
  bn1.collect(prefix + ".bn1", out);
  conv2.collect(prefix + ".conv2", out);
  bn2.collect(prefix + ".bn2", out);
  skip.collect(prefix + ".skip", out);
  bn_skip.collect(prefix + ".bn_skip", out);
}

MultiscaleEmbed::MultiscaleEmbed(std::size_t channels, bool multiscale, std::size_t patch,
                                 Rng& rng) {
  const std::vector<std::size_t> kernels =
      multiscale ? std::vector<std::size_t>{3, 5, 7} : std::vector<std::size_t>{3};
  for (auto k : kernels) {
    convs.emplace_back(channels, channels, k, rng);
    bns.emplace_back(channels);
  }
  pe = attn::positional_encoding(patch * patch, channels * kernels.size());
}

Tensor MultiscaleEmbed::forward(const Tensor& x, Mode mode) const {
  std::vector<Tensor> branches;
  branches.reserve(convs.size());
  for (std::size_t i = 0; i < convs.size(); ++i) {
    branches.push_back(nn::mish(bns[i].forward(convs[i].forward(x), mode)));
  }
  const Tensor cat = branches.size() == 1 ? branches[0] : concat(branches, 1);
  return add(map_to_tokens(cat), pe);
}

void MultiscaleEmbed::collect(const std::string& prefix, nn::ParamList& out) const {
  for (std::size_t i = 0; i < convs.size(); ++i) {
    const std::string k = std::to_string(convs[i].kernel_size());
    convs[i].collect(prefix + ".conv" + k, out);
    bns[i].collect(prefix + ".bn" + k, out);
  }
}

Dccsa::Dccsa(std::size_t channels, std::size_t reduction, Rng& rng) {
  if (channels < reduction) {
    throw ConfigError("DCCSA needs at least " + std::to_string(reduction) + " channels, got " +
                      std::to_string(channels));
  }
  const std::size_t hidden = channels / reduction;
  ch_conv3 = nn::Conv2d(channels, channels, 3, rng);
  ch_conv5 = nn::Conv2d(channels, channels, 5, rng);
  mlp_reduce = nn::Conv2d(channels, hidden, 1, rng);
  mlp_expand = nn::Conv2d(hidden, channels, 1, rng);
  sp_conv3 = nn::Conv2d(2, 1, 3, rng);
  sp_conv5 = nn::Conv2d(2, 1, 5, rng);
  fuse = nn::Conv2d(2 * channels, channels, 3, rng);
}

Tensor Dccsa::channel(const Tensor& f) const {
  const Tensor fconv = add(ch_conv3.forward(f), ch_conv5.forward(f));
  auto mlp = [this](const Tensor& pooled) {
    return mlp_expand.forward(nn::mish(mlp_reduce.forward(pooled)));
  };
  const Tensor w = add(mlp(nn::global_max_pool(fconv)), mlp(nn::global_avg_pool(fconv)));
  return mul(f, nn::sigmoid(w));
}

Tensor Dccsa::spatial(const Tensor& fc, const Tensor& skip) const {
  if (fc.shape() != skip.shape()) {
    throw ShapeError("DCCSA spatial branch: feature " + shape_str(fc.shape()) + " vs skip " +
                     shape_str(skip.shape()));
  }
  const Tensor pooled = nn::channelwise_pool(fc);
  const Tensor gate = nn::sigmoid(add(sp_conv3.forward(pooled), sp_conv5.forward(pooled)));
  return fuse.forward(concat({skip, mul(fc, gate)}, 1));
}

void Dccsa::collect(const std::string& prefix, nn::ParamList& out) const {
  ch_conv3.collect(prefix + ".ch_conv3", out);
  ch_conv5.collect(prefix + ".ch_conv5", out);
  mlp_reduce.collect(prefix + ".mlp_reduce", out);
  mlp_expand.collect(prefix + ".mlp_expand", out);
  sp_conv3.collect(prefix + ".sp_conv3", out);
  sp_conv5.collect(prefix + ".sp_conv5", out);
  fuse.collect(prefix + ".fuse", out);
}

Subnetwork::Subnetwork(const ModelConfig& cfg, Rng& rng) : patch_(cfg.patch) {
  const std::size_t c = cfg.base_channels;
  const std::size_t d = cfg.model_dim();
  residual = ResidualBlock(cfg.bands, c, rng);
  embed = MultiscaleEmbed(c, cfg.use_msc, cfg.patch, rng);
  for (std::size_t i = 0; i < cfg.enc_layers; ++i) {
    encoders.emplace_back(d, cfg.heads, cfg.ffn_mult * d, rng);
  }
  dec_embed = nn::Conv2d(c, d, 1, rng);
  if (cfg.use_dccsa) dccsa.emplace(d, cfg.reduction, rng);
  for (std::size_t i = 0; i < cfg.dec_layers; ++i) {
    decoders.emplace_back(d, cfg.heads, cfg.ffn_mult * d, rng);
  }
  if (cfg.causal_mask) causal = attn::AttentionMask::causal(cfg.tokens());
}

SubnetworkFeatures Subnetwork::forward(const Tensor& patch, Mode mode) const {
  SubnetworkFeatures f;
  f.rf = residual.forward(patch, mode);

  Tensor enc = embed.forward(f.rf, mode);
  for (const auto& layer : encoders) enc = layer.forward(enc);
  f.ef = tokens_to_map(enc, patch_);

  Tensor dec_map = dec_embed.forward(f.rf);
  if (dccsa) dec_map = dccsa->forward(dec_map, f.ef);
  Tensor dec = add(map_to_tokens(dec_map), embed.pe);
  const attn::AttentionMask* mask = causal ? &*causal : nullptr;
  for (const auto& layer : decoders) dec = layer.forward(dec, enc, mask);
  f.df = tokens_to_map(dec, patch_);
  return f;
}

void Subnetwork::collect(const std::string& prefix, nn::ParamList& out) const {
  residual.collect(prefix + ".residual", out);
  embed.collect(prefix + ".embed", out);
  for (std::size_t i = 0; i < encoders.size(); ++i) {
    encoders[i].collect(prefix + ".encoder" + std::to_string(i), out);
  }
  dec_embed.collect(prefix + ".dec_embed", out);
  if (dccsa) dccsa->collect(prefix + ".dccsa", out);
  for (std::size_t i = 0; i < decoders.size(); ++i) {
    decoders[i].collect(prefix + ".decoder" + std::to_string(i), out);
  }
}

Stcfl::Stcfl(std::size_t channels, Rng& rng)
    : c1(channels, channels, 1, rng),
      c2(channels, channels, 1, rng),
      c3(channels, channels, 1, rng),
      b1(channels),
      b2(channels),
      b3(channels),
      conv_x1(channels, channels, 3, rng),
      conv_x2(channels, channels, 3, rng),
      bn_x1(channels),
      bn_x2(channels),
      proj(2 * channels, channels, 1, rng) {}

StcflOutputs Stcfl::forward(const Tensor& f1, const Tensor& f2, const Tensor& f3,
                            Mode mode) const {
  if (f1.shape() != f2.shape() || f2.shape() != f3.shape()) {
    throw ShapeError("STCFL inputs must share a shape: " + shape_str(f1.shape()) + ", " +
                     shape_str(f2.shape()) + ", " + shape_str(f3.shape()));
  }
  const Tensor y1 = b1.forward(c1.forward(f1), mode);
  const Tensor y2 = b2.forward(c2.forward(f2), mode);
  const Tensor y3 = b3.forward(c3.forward(f3), mode);
  const Tensor x1 = add(y1, y2);
  const Tensor x2 = add(y2, y3);
  StcflOutputs out;
  out.o2 = concat({x1, x2}, 1);
  const Tensor dense = proj.forward(out.o2);
  out.o1 = add(add(y1, nn::relu(bn_x2.forward(conv_x2.forward(x2), mode))), dense);
  out.o3 = add(add(nn::relu(bn_x1.forward(conv_x1.forward(x1), mode)), y3), dense);
  return out;
}

void Stcfl::collect(const std::string& prefix, nn::ParamList& out) const {
  c1.collect(prefix + ".c1", out);
  b1.collect(prefix + ".b1", out);
  c2.collect(prefix + ".c2", out);
  b2.collect(prefix + ".b2", out);
  c3.collect(prefix + ".c3", out);
  b3.collect(prefix + ".b3", out);
  conv_x1.collect(prefix + ".conv_x1", out);
  bn_x1.collect(prefix + ".bn_x1", out);
  conv_x2.collect(prefix + ".conv_x2", out);
  bn_x2.collect(prefix + ".bn_x2", out);
  proj.collect(prefix + ".proj", out);
}

Afaf::Afaf(std::size_t channels, std::size_t reduction, Rng& rng) {
  const std::size_t wide = 2 * channels;
  if (wide < reduction) throw ConfigError("AFAF channel count below reduction ratio");
  const std::size_t hidden = wide / reduction;
  conv_s1 = nn::Conv2d(channels, wide, 3, rng);
  conv_s3 = nn::Conv2d(channels, wide, 3, rng);
  squeeze = nn::Conv2d(wide, hidden, 1, rng);
  bn = nn::BatchNorm(hidden);
  excite = nn::Conv2d(hidden, wide, 1, rng);
}

Tensor Afaf::forward(const Tensor& s1, const Tensor& s2, const Tensor& s3, Mode mode,
                     Tensor* weights) const {
  const Tensor a = conv_s1.forward(s1);
  const Tensor c = conv_s3.forward(s3);
  if (s2.shape() != a.shape()) {
    throw ShapeError("AFAF channel mismatch: Fs2 " + shape_str(s2.shape()) + " vs conv(Fs1) " +
                     shape_str(a.shape()));
  }
  const Tensor f = add(add(a, s2), c);
  const Tensor w = nn::sigmoid(
      excite.forward(nn::relu(bn.forward(squeeze.forward(nn::global_avg_pool(f)), mode))));
  if (weights != nullptr) *weights = w;
  return concat({mul(a, w), mul(s2, w), mul(c, w)}, 1);
}

void Afaf::collect(const std::string& prefix, nn::ParamList& out) const {
  conv_s1.collect(prefix + ".conv_s1", out);
  conv_s3.collect(prefix + ".conv_s3", out);
  squeeze.collect(prefix + ".squeeze", out);
  bn.collect(prefix + ".bn", out);
  excite.collect(prefix + ".excite", out);
}

ClassifierHead::ClassifierHead(std::size_t in_channels, std::size_t channels, Rng& rng)
    : conv(in_channels, channels, 5, rng),
      fc1(channels, std::max<std::size_t>(1, channels / 2), rng),
      fc2(std::max<std::size_t>(1, channels / 2), 2, rng) {}

Tensor ClassifierHead::forward(const Tensor& fused) const {
  const Tensor pooled = nn::global_avg_pool(conv.forward(fused));
  const Tensor flat = reshape(pooled, {pooled.dim(0), pooled.dim(1)});
  return nn::softmax(fc2.forward(nn::relu(fc1.forward(flat))), 1);
}

void ClassifierHead::collect(const std::string& prefix, nn::ParamList& out) const {
  conv.collect(prefix + ".conv", out);
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

// ---------------------------------------------------------------------------

ChmffnModel::ChmffnModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const std::size_t d = cfg_.model_dim();
  subnet = Subnetwork(cfg_, rng);
  rf_proj = nn::Conv2d(cfg_.base_channels, d, 1, rng, /*with_bias=*/false);
  if (cfg_.use_stcfl) stcfl.emplace(d, rng);
  if (cfg_.use_afaf) afaf.emplace(d, cfg_.reduction, rng);
  head = ClassifierHead(cfg_.use_afaf ? 6 * d : 4 * d, d, rng);
}

SubnetworkFeatures ChmffnModel::subnetwork_forward(const Tensor& patch, Mode mode) const {
  if (patch.rank() != 4 || patch.dim(1) != cfg_.bands || patch.dim(2) != cfg_.patch ||
      patch.dim(3) != cfg_.patch) {
    throw ShapeError("model expects patches (b," + std::to_string(cfg_.bands) + "," +
                     std::to_string(cfg_.patch) + "," + std::to_string(cfg_.patch) + "), got " +
                     shape_str(patch.shape()));
  }
  return subnet.forward(patch, mode);
}

Tensor ChmffnModel::level_diff(const Tensor& later, const Tensor& earlier) const {
  const Tensor d = sub(later, earlier);
  return cfg_.diff_mode == DiffMode::absolute ? abs(d) : d;
}

PairTrace ChmffnModel::forward_trace(const Tensor& p1, const Tensor& p2, Mode mode) const {
  if (p1.shape() != p2.shape()) {
    throw ShapeError("temporal patches differ in shape: " + shape_str(p1.shape()) + " vs " +
                     shape_str(p2.shape()));
  }
  PairTrace t;
  // Both dates go through the shared branch as one stacked batch, so
  // training-mode batch statistics are common to T1 and T2 and match the
  // running statistics used at evaluation.
  const std::size_t b = p1.rank() == 4 ? p1.dim(0) : 0;
  const SubnetworkFeatures both = subnetwork_forward(concat({p1, p2}, 0), mode);
  auto half = [b](const Tensor& x, std::size_t i) { return slice(x, 0, i * b, b); };
  t.t1 = {half(both.rf, 0), half(both.ef, 0), half(both.df, 0)};
  t.t2 = {half(both.rf, 1), half(both.ef, 1), half(both.df, 1)};
  t.f1 = rf_proj.forward(level_diff(t.t2.rf, t.t1.rf));
  t.f2 = level_diff(t.t2.ef, t.t1.ef);
  t.f3 = level_diff(t.t2.df, t.t1.df);
  if (stcfl) {
    t.stcfl = stcfl->forward(t.f1, t.f2, t.f3, mode);
  } else {
    t.stcfl = StcflOutputs{t.f1, concat({t.f1, t.f2}, 1), t.f3};
  }
  if (afaf) {
    t.fused = afaf->forward(t.stcfl.o1, t.stcfl.o2, t.stcfl.o3, mode);
  } else {
    t.fused = concat({t.stcfl.o1, t.stcfl.o2, t.stcfl.o3}, 1);
  }
  t.probs = head.forward(t.fused);
  return t;
}

nn::ParamList ChmffnModel::named_tensors() const {
  nn::ParamList out;
  subnet.collect("subnet", out);
  rf_proj.collect("rf_proj", out);
  if (stcfl) stcfl->collect("stcfl", out);
  if (afaf) afaf->collect("afaf", out);
  head.collect("head", out);
  return out;
}

std::vector<Tensor> ChmffnModel::parameters() const {
  std::vector<Tensor> params;
  for (const auto& p : named_tensors()) {
    if (p.trainable) params.push_back(p.tensor);
  }
  return params;
}

// ---------------------------------------------------------------------------

Tensor bce_loss(const Tensor& probs, const std::vector<int>& labels) {
  if (probs.rank() != 2 || probs.dim(1) != 2) {
    throw ShapeError("bce_loss expects (b,2) probabilities, got " + shape_str(probs.shape()));
  }
  const std::size_t n = probs.dim(0);
  if (labels.size() != n) throw ShapeError("bce_loss label count does not match batch");
  constexpr double lo = 1e-12, hi = 1.0 - 1e-12;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::clamp(probs[i * 2 + 1], lo, hi);
    const double y = labels[i] != 0 ? 1.0 : 0.0;
    total += y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  Tensor out = Tensor::scalar(-total / static_cast<double>(n));
  return detail::finish(out, {probs}, [probs, labels, n](Tensor out) {
    return [probs, labels, n, out]() mutable {
      const double g = out.grad()[0];
      auto gp = probs.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const double p = probs[i * 2 + 1];
        if (p < lo || p > hi) continue;
        const double y = labels[i] != 0 ? 1.0 : 0.0;
        gp[i * 2 + 1] += -g * (y / p - (1.0 - y) / (1.0 - p)) / static_cast<double>(n);
      }
    };
  });
}

}  // namespace chmffn
