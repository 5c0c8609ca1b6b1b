#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "chmffn/rng.hpp"
#include "chmffn/tensor.hpp"

namespace chmffn::nn {

// ---------------------------------------------------------------------------
// Functional primitives. All are differentiable with respect to every tensor
// argument except BatchNorm running statistics.
// ---------------------------------------------------------------------------

// Same-padded, stride-1 cross-correlation. x (b,ci,h,w), weight (co,ci,k,k)
// with odd k; bias (co) or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias);

// x is (n,c) or (b,c,h,w). In training mode normalizes with the biased batch
// variance over every axis but the channel axis and blends the batch
// statistics into the running buffers:
//   running <- momentum * running + (1 - momentum) * batch.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor running_mean,
                  Tensor running_var, bool training, double momentum, double eps);

// Normalizes over the last dimension.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

// y = x W^T + b over the last dimension of x; weight (out,in), bias (out) or
// undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor mish(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor tanh_act(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis);

// Square windows without padding; x (b,c,h,w).
Tensor max_pool2d(const Tensor& x, std::size_t window, std::size_t stride);
Tensor avg_pool2d(const Tensor& x, std::size_t window, std::size_t stride);
// (b,c,h,w) -> (b,c,1,1)
Tensor global_max_pool(const Tensor& x);
Tensor global_avg_pool(const Tensor& x);
// (b,c,h,w) -> (b,2,h,w): per-pixel max over channels, then mean over channels.
Tensor channelwise_pool(const Tensor& x);

// Scalar helpers shared with the tests' reference implementations.
double softplus(double x);
double mish_scalar(double x);
double sigmoid_scalar(double x);

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

enum class Mode { train, eval };

struct NamedTensor {
  std::string name;
  Tensor tensor;
  // False for state that is saved but not optimized (BN running stats).
  bool trainable = true;
};
using ParamList = std::vector<NamedTensor>;

// uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
Tensor xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, Rng& rng,
         bool with_bias = true);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;

  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t kernel_size() const { return weight.dim(2); }

  Tensor weight;
  Tensor bias;
};

class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels, double momentum = 0.9, double eps = 1e-5);

  Tensor forward(const Tensor& x, Mode mode) const;
  void collect(const std::string& prefix, ParamList& out) const;

  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.9;
  double eps = 1e-5;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim, double eps = 1e-5);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;

  Tensor gamma;
  Tensor beta;
  double eps = 1e-5;
};

class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in_features, std::size_t out_features, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;

  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }

  Tensor weight;
  Tensor bias;
};

}  // namespace chmffn::nn
