#include "chmffn/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "chmffn/error.hpp"
#include "chmffn/gemm.hpp"
#include "record.hpp"

namespace chmffn::nn {

using detail::finish;

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace {

// Column matrix layout is (c*k*k, b*h*w): sample n occupies columns
// [n*h*w, (n+1)*h*w), and `ld` is the full row length b*h*w.
void im2col(const double* x, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
            double* cols, std::size_t ld) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto H = static_cast<std::ptrdiff_t>(h);
  const auto W = static_cast<std::ptrdiff_t>(w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* plane = x + ch * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols + ((ch * k + ky) * k + kx) * ld;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
        for (std::ptrdiff_t y = 0; y < H; ++y) {
          const std::ptrdiff_t sy = y + dy;
          double* dst = row + y * W;
          if (sy < 0 || sy >= H) {
            std::fill(dst, dst + W, 0.0);
            continue;
          }
          const double* src = plane + sy * W;
          for (std::ptrdiff_t xx = 0; xx < W; ++xx) {
            const std::ptrdiff_t sx = xx + dx;
            dst[xx] = (sx < 0 || sx >= W) ? 0.0 : src[sx];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, std::size_t ld, std::size_t c, std::size_t h, std::size_t w,
                std::size_t k, double* x) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto H = static_cast<std::ptrdiff_t>(h);
  const auto W = static_cast<std::ptrdiff_t>(w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double* plane = x + ch * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = cols + ((ch * k + ky) * k + kx) * ld;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
        for (std::ptrdiff_t y = 0; y < H; ++y) {
          const std::ptrdiff_t sy = y + dy;
          if (sy < 0 || sy >= H) continue;
          double* dst = plane + sy * W;
          const double* src = row + y * W;
          for (std::ptrdiff_t xx = 0; xx < W; ++xx) {
            const std::ptrdiff_t sx = xx + dx;
            if (sx >= 0 && sx < W) dst[sx] += src[xx];
          }
        }
      }
    }
  }
}

// (b, c, hw) <-> (c, b*hw)
void batch_to_channel_major(const double* src, std::size_t b, std::size_t c, std::size_t hw,
                            double* dst) {
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      std::copy_n(src + (n * c + ch) * hw, hw, dst + ch * b * hw + n * hw);
    }
  }
}

void channel_major_to_batch(const double* src, std::size_t b, std::size_t c, std::size_t hw,
                            double* dst, bool accumulate) {
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* s = src + ch * b * hw + n * hw;
      double* d = dst + (n * c + ch) * hw;
      if (accumulate) {
        for (std::size_t i = 0; i < hw; ++i) d[i] += s[i];
      } else {
        std::copy_n(s, hw, d);
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 4 || weight.rank() != 4) {
    throw ShapeError("conv2d expects x (b,c,h,w) and weight (co,ci,k,k), got " +
                     shape_str(x.shape()) + " and " + shape_str(weight.shape()));
  }
  const std::size_t b = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t co = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != ci) {
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(ci) +
                     " channels, kernel expects " + std::to_string(weight.dim(1)));
  }
  if (weight.dim(3) != k || k % 2 == 0) throw ShapeError("conv2d kernel must be square and odd");
  if (bias.defined() && bias.numel() != co) throw ShapeError("conv2d bias length mismatch");

  const std::size_t hw = h * w;
  const std::size_t ld = b * hw;
  const std::size_t ckk = ci * k * k;
  // One GEMM over the whole batch: (co, ckk) x (ckk, b*hw).
  auto cols = std::make_shared<std::vector<double>>(ckk * ld);
  if (k == 1) {
    batch_to_channel_major(x.data().data(), b, ci, hw, cols->data());
  } else {
    for (std::size_t n = 0; n < b; ++n) {
      im2col(x.data().data() + n * ci * hw, ci, h, w, k, cols->data() + n * hw, ld);
    }
  }
  std::vector<double> y(co * ld);
  gemm(false, false, co, ld, ckk, weight.data().data(), cols->data(), y.data(), false);
  Tensor out({b, co, h, w});
  double* o = out.data().data();
  channel_major_to_batch(y.data(), b, co, hw, o, false);
  if (bias.defined()) {
    for (std::size_t n = 0; n < b; ++n) {
      for (std::size_t oc = 0; oc < co; ++oc) {
        const double bv = bias[oc];
        double* p = o + (n * co + oc) * hw;
        for (std::size_t i = 0; i < hw; ++i) p[i] += bv;
      }
    }
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return finish(out, std::move(inputs), [=](Tensor out) {
    return [=]() mutable {
      const double* g = out.grad().data();
      std::vector<double> gy(co * ld);
      batch_to_channel_major(g, b, co, hw, gy.data());
      if (weight.requires_grad()) {
        gemm(false, true, co, ckk, ld, gy.data(), cols->data(), weight.grad_buffer().data(), true);
      }
      if (bias.defined() && bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::size_t oc = 0; oc < co; ++oc) {
          const double* p = gy.data() + oc * ld;
          double s = 0.0;
          for (std::size_t i = 0; i < ld; ++i) s += p[i];
          gb[oc] += s;
        }
      }
      if (x.requires_grad()) {
        double* gx = x.grad_buffer().data();
        std::vector<double> gcols(ckk * ld);
        gemm(true, false, ckk, ld, co, weight.data().data(), gy.data(), gcols.data(), false);
        if (k == 1) {
          channel_major_to_batch(gcols.data(), b, ci, hw, gx, true);
        } else {
          for (std::size_t n = 0; n < b; ++n) {
            col2im_add(gcols.data() + n * hw, ld, ci, h, w, k, gx + n * ci * hw);
          }
        }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor running_mean,
                  Tensor running_var, bool training, double momentum, double eps) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw ShapeError("batch_norm expects (n,c) or (b,c,h,w), got " + shape_str(x.shape()));
  }
  const std::size_t b = x.dim(0), c = x.dim(1);
  const std::size_t hw = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
      running_var.numel() != c) {
    throw ShapeError("batch_norm channel mismatch: input has " + std::to_string(c) + " channels");
  }
  const std::size_t m = b * hw;
  if (training && m < 2) {
    throw ShapeError("batch_norm in training mode needs at least 2 values per channel");
  }
  auto xd = x.data();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(c);
  Tensor out(x.shape());
  auto o = out.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (training) {
      double s = 0.0;
      for (std::size_t n = 0; n < b; ++n) {
        const double* p = xd.data() + (n * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
      }
      mu = s / static_cast<double>(m);
      double ss = 0.0;
      for (std::size_t n = 0; n < b; ++n) {
        const double* p = xd.data() + (n * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      var = ss / static_cast<double>(m);
      running_mean[ch] = momentum * running_mean[ch] + (1.0 - momentum) * mu;
      running_var[ch] = momentum * running_var[ch] + (1.0 - momentum) * var;
    } else {
      mu = running_mean[ch];
      var = running_var[ch];
    }
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[ch] = is;
    const double gm = gamma[ch], bt = beta[ch];
    for (std::size_t n = 0; n < b; ++n) {
      const std::size_t base = (n * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double xh = (xd[base + i] - mu) * is;
        (*xhat)[base + i] = xh;
        o[base + i] = gm * xh + bt;
      }
    }
  }
  return finish(out, {x, gamma, beta}, [=](Tensor out) {
    return [=]() mutable {
      auto g = out.grad();
      const bool need_g = gamma.requires_grad(), need_b = beta.requires_grad();
      const bool need_x = x.requires_grad();
      std::span<double> gg = need_g ? gamma.grad_buffer() : std::span<double>{};
      std::span<double> gbt = need_b ? beta.grad_buffer() : std::span<double>{};
      std::span<double> gx = need_x ? x.grad_buffer() : std::span<double>{};
      for (std::size_t ch = 0; ch < c; ++ch) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t n = 0; n < b; ++n) {
          const std::size_t base = (n * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            sum_g += g[base + i];
            sum_gx += g[base + i] * (*xhat)[base + i];
          }
        }
        if (need_g) gg[ch] += sum_gx;
        if (need_b) gbt[ch] += sum_g;
        if (!need_x) continue;
        const double gm = gamma[ch];
        const double is = (*inv_std)[ch];
        const double md = static_cast<double>(m);
        for (std::size_t n = 0; n < b; ++n) {
          const std::size_t base = (n * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            if (training) {
              gx[base + i] +=
                  gm * is * (g[base + i] - sum_g / md - (*xhat)[base + i] * sum_gx / md);
            } else {
              gx[base + i] += gm * is * g[base + i];
            }
          }
        }
      }
    };
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = x.shape().back();
  if (d < 2) throw ShapeError("layer_norm needs a last dimension of at least 2");
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm affine size mismatch for " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto xd = x.data();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Tensor out(x.shape());
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = xd.data() + r * d;
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += p[i];
    const double mu = s / static_cast<double>(d);
    double ss = 0.0;
    for (std::size_t i = 0; i < d; ++i) ss += (p[i] - mu) * (p[i] - mu);
    const double is = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    (*inv_std)[r] = is;
    for (std::size_t i = 0; i < d; ++i) {
      const double xh = (p[i] - mu) * is;
      (*xhat)[r * d + i] = xh;
      o[r * d + i] = gamma[i] * xh + beta[i];
    }
  }
  return finish(out, {x, gamma, beta}, [=](Tensor out) {
    return [=]() mutable {
      auto g = out.grad();
      const bool need_x = x.requires_grad();
      std::span<double> gg = gamma.requires_grad() ? gamma.grad_buffer() : std::span<double>{};
      std::span<double> gbt = beta.requires_grad() ? beta.grad_buffer() : std::span<double>{};
      std::span<double> gx = need_x ? x.grad_buffer() : std::span<double>{};
      const double dd = static_cast<double>(d);
      std::vector<double> dxh(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g.data() + r * d;
        const double* xh = xhat->data() + r * d;
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          if (!gg.empty()) gg[i] += gr[i] * xh[i];
          if (!gbt.empty()) gbt[i] += gr[i];
          dxh[i] = gr[i] * gamma[i];
          s1 += dxh[i];
          s2 += dxh[i] * xh[i];
        }
        if (!need_x) continue;
        const double is = (*inv_std)[r];
        for (std::size_t i = 0; i < d; ++i) {
          gx[r * d + i] += is * (dxh[i] - s1 / dd - xh[i] * s2 / dd);
        }
      }
    };
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2) throw ShapeError("linear weight must be (out,in)");
  const std::size_t out_f = weight.dim(0), in_f = weight.dim(1);
  if (x.shape().back() != in_f) {
    throw ShapeError("linear dimension mismatch: input " + shape_str(x.shape()) + ", weight " +
                     shape_str(weight.shape()));
  }
  if (bias.defined() && bias.numel() != out_f) throw ShapeError("linear bias length mismatch");
  const std::size_t rows = x.numel() / in_f;
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  Tensor out(out_shape);
  gemm(false, true, rows, out_f, in_f, x.data().data(), weight.data().data(), out.data().data(),
       false);
  if (bias.defined()) {
    auto o = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < out_f; ++j) o[r * out_f + j] += bias[j];
    }
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return finish(out, std::move(inputs), [=](Tensor out) {
    return [=]() mutable {
      const double* g = out.grad().data();
      if (x.requires_grad()) {
        gemm(false, false, rows, in_f, out_f, g, weight.data().data(), x.grad_buffer().data(),
             true);
      }
      if (weight.requires_grad()) {
        gemm(true, false, out_f, in_f, rows, g, x.data().data(), weight.grad_buffer().data(),
             true);
      }
      if (bias.defined() && bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < out_f; ++j) gb[j] += g[r * out_f + j];
        }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

double softplus(double x) {
  // log(1 + e^x) without overflow for large |x|.
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double mish_scalar(double x) { return x * std::tanh(softplus(x)); }

namespace {

// Element-wise op whose derivative is computed from the input and output.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  Tensor out(x.shape());
  auto o = out.data();
  auto xd = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(xd[i]);
  return finish(out, {x}, [x, deriv](Tensor out) {
    return [x, out, deriv]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto xd = x.data();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xd[i], y[i]);
    };
  });
}

}  // namespace

Tensor mish(const Tensor& x) {
  return unary(x, mish_scalar, [](double v, double) {
    const double t = std::tanh(softplus(v));
    return t + v * (1.0 - t * t) * sigmoid_scalar(v);
  });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh_act(const Tensor& x) {
  return unary(x, [](double v) { return std::tanh(v); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax axis out of range");
  std::size_t outer = 1, inner = 1;
  const std::size_t len = x.dim(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Tensor out(x.shape());
  auto o = out.data();
  auto xd = x.data();
  for (std::size_t a = 0; a < outer; ++a) {
    for (std::size_t c = 0; c < inner; ++c) {
      const std::size_t base = a * len * inner + c;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, xd[base + i * inner]);
      double s = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        const double e = std::exp(xd[base + i * inner] - mx);
        o[base + i * inner] = e;
        s += e;
      }
      for (std::size_t i = 0; i < len; ++i) o[base + i * inner] /= s;
    }
  }
  return finish(out, {x}, [=](Tensor out) {
    return [=]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.grad_buffer();
      for (std::size_t a = 0; a < outer; ++a) {
        for (std::size_t c = 0; c < inner; ++c) {
          const std::size_t base = a * len * inner + c;
          double dot = 0.0;
          for (std::size_t i = 0; i < len; ++i) dot += g[base + i * inner] * y[base + i * inner];
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t j = base + i * inner;
            gx[j] += y[j] * (g[j] - dot);
          }
        }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

namespace {

void require_4d(const char* op, const Tensor& x) {
  if (x.rank() != 4) {
    throw ShapeError(std::string(op) + " expects (b,c,h,w), got " + shape_str(x.shape()));
  }
}

Tensor pool2d(const Tensor& x, std::size_t wh, std::size_t ww, std::size_t stride, bool is_max) {
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (wh == 0 || ww == 0 || stride == 0) throw ShapeError("pool window and stride must be positive");
  if (wh > h || ww > w) {
    throw ShapeError("pool window larger than input " + shape_str(x.shape()));
  }
  const std::size_t oh = (h - wh) / stride + 1, ow = (w - ww) / stride + 1;
  Tensor out({b, c, oh, ow});
  auto o = out.data();
  auto xd = x.data();
  // For max pooling, the flat input index that won each output cell.
  auto argmax = std::make_shared<std::vector<std::size_t>>(is_max ? out.numel() : 0);
  const double inv_area = 1.0 / static_cast<double>(wh * ww);
  for (std::size_t p = 0; p < b * c; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t oi = (p * oh + oy) * ow + ox;
        double acc = is_max ? -std::numeric_limits<double>::infinity() : 0.0;
        std::size_t best = 0;
        for (std::size_t ky = 0; ky < wh; ++ky) {
          for (std::size_t kx = 0; kx < ww; ++kx) {
            const std::size_t xi = (p * h + oy * stride + ky) * w + ox * stride + kx;
            if (is_max) {
              if (xd[xi] > acc) {
                acc = xd[xi];
                best = xi;
              }
            } else {
              acc += xd[xi];
            }
          }
        }
        if (is_max) {
          o[oi] = acc;
          (*argmax)[oi] = best;
        } else {
          o[oi] = acc * inv_area;
        }
      }
    }
  }
  return finish(out, {x}, [=](Tensor out) {
    return [=]() mutable {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      if (is_max) {
        for (std::size_t oi = 0; oi < g.size(); ++oi) gx[(*argmax)[oi]] += g[oi];
        return;
      }
      for (std::size_t p = 0; p < b * c; ++p) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const double gv = g[(p * oh + oy) * ow + ox] * inv_area;
            for (std::size_t ky = 0; ky < wh; ++ky) {
              for (std::size_t kx = 0; kx < ww; ++kx) {
                gx[(p * h + oy * stride + ky) * w + ox * stride + kx] += gv;
              }
            }
          }
        }
      }
    };
  });
}

}  // namespace

Tensor max_pool2d(const Tensor& x, std::size_t window, std::size_t stride) {
  require_4d("max_pool2d", x);
  return pool2d(x, window, window, stride, true);
}

Tensor avg_pool2d(const Tensor& x, std::size_t window, std::size_t stride) {
  require_4d("avg_pool2d", x);
  return pool2d(x, window, window, stride, false);
}

Tensor global_max_pool(const Tensor& x) {
  require_4d("global_max_pool", x);
  return pool2d(x, x.dim(2), x.dim(3), 1, true);
}

Tensor global_avg_pool(const Tensor& x) {
  require_4d("global_avg_pool", x);
  return pool2d(x, x.dim(2), x.dim(3), 1, false);
}

Tensor channelwise_pool(const Tensor& x) {
  require_4d("channelwise_pool", x);
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({b, 2, x.dim(2), x.dim(3)});
  auto o = out.data();
  auto xd = x.data();
  auto argmax = std::make_shared<std::vector<std::size_t>>(b * hw);
  const double inv_c = 1.0 / static_cast<double>(c);
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t i = 0; i < hw; ++i) {
      std::size_t best = n * c * hw + i;
      double mx = xd[best], s = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t xi = (n * c + ch) * hw + i;
        if (xd[xi] > mx) {
          mx = xd[xi];
          best = xi;
        }
        s += xd[xi];
      }
      o[(n * 2 + 0) * hw + i] = mx;
      o[(n * 2 + 1) * hw + i] = s * inv_c;
      (*argmax)[n * hw + i] = best;
    }
  }
  return finish(out, {x}, [=](Tensor out) {
    return [=]() mutable {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t n = 0; n < b; ++n) {
        for (std::size_t i = 0; i < hw; ++i) {
          gx[(*argmax)[n * hw + i]] += g[(n * 2 + 0) * hw + i];
          const double gm = g[(n * 2 + 1) * hw + i] * inv_c;
          for (std::size_t ch = 0; ch < c; ++ch) gx[(n * c + ch) * hw + i] += gm;
        }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

Tensor xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = uniform_tensor(std::move(shape), -a, a, rng);
  t.set_requires_grad(true);
  return t;
}

Conv2d::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, Rng& rng,
               bool with_bias) {
  if (kernel % 2 == 0) throw ConfigError("conv kernel size must be odd");
  if (in_channels == 0 || out_channels == 0) throw ConfigError("conv channels must be positive");
  weight = xavier_uniform({out_channels, in_channels, kernel, kernel},
                          in_channels * kernel * kernel, out_channels * kernel * kernel, rng);
  if (with_bias) bias = Tensor({out_channels}, 0.0, true);
}

Tensor Conv2d::forward(const Tensor& x) const { return conv2d(x, weight, bias); }

void Conv2d::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight, true});
  if (bias.defined()) out.push_back({prefix + ".bias", bias, true});
}

BatchNorm::BatchNorm(std::size_t channels, double momentum_, double eps_)
    : gamma({channels}, 1.0, true),
      beta({channels}, 0.0, true),
      running_mean({channels}, 0.0),
      running_var({channels}, 1.0),
      momentum(momentum_),
      eps(eps_) {}

Tensor BatchNorm::forward(const Tensor& x, Mode mode) const {
  return batch_norm(x, gamma, beta, running_mean, running_var, mode == Mode::train, momentum, eps);
}

void BatchNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gamma", gamma, true});
  out.push_back({prefix + ".beta", beta, true});
  out.push_back({prefix + ".running_mean", running_mean, false});
  out.push_back({prefix + ".running_var", running_var, false});
}

LayerNorm::LayerNorm(std::size_t dim, double eps_)
    : gamma({dim}, 1.0, true), beta({dim}, 0.0, true), eps(eps_) {}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gamma", gamma, true});
  out.push_back({prefix + ".beta", beta, true});
}

Linear::Linear(std::size_t in_features, std::size_t out_features, Rng& rng)
    : weight(xavier_uniform({out_features, in_features}, in_features, out_features, rng)),
      bias({out_features}, 0.0, true) {}

Tensor Linear::forward(const Tensor& x) const { return linear(x, weight, bias); }

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight, true});
  out.push_back({prefix + ".bias", bias, true});
}

}  // namespace chmffn::nn
