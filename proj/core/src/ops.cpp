#include "chmffn/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "chmffn/error.hpp"
#include "chmffn/gemm.hpp"
#include "record.hpp"

namespace chmffn {

using detail::finish;

namespace {

using Dims4 = std::array<std::size_t, 4>;

Dims4 pad4(const Shape& s) {
  Dims4 d{1, 1, 1, 1};
  const std::size_t off = 4 - s.size();
  for (std::size_t i = 0; i < s.size(); ++i) d[off + i] = s[i];
  return d;
}

// Strides of b, right-aligned into a's 4-d index space; 0 on broadcast axes.
Dims4 broadcast_strides(const Shape& a, const Shape& b) {
  const Dims4 da = pad4(a);
  const Dims4 db = pad4(b);
  Dims4 strides{};
  std::size_t stride = 1;
  for (int ax = 3; ax >= 0; --ax) {
    strides[ax] = (db[ax] == 1 && da[ax] != 1) ? 0 : stride;
    stride *= db[ax];
  }
  return strides;
}

void require_broadcast(const char* op, const Tensor& a, const Tensor& b) {
  if (!broadcastable(a.shape(), b.shape())) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Calls fn(i, j) for every flat index i of a and matching flat index j of b.
template <typename Fn>
void for_each_broadcast(const Shape& a, const Shape& b, Fn&& fn) {
  const Dims4 da = pad4(a);
  const Dims4 sb = broadcast_strides(a, b);
  std::size_t i = 0;
  for (std::size_t i0 = 0; i0 < da[0]; ++i0) {
    for (std::size_t i1 = 0; i1 < da[1]; ++i1) {
      for (std::size_t i2 = 0; i2 < da[2]; ++i2) {
        const std::size_t base = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
        for (std::size_t i3 = 0; i3 < da[3]; ++i3, ++i) fn(i, base + i3 * sb[3]);
      }
    }
  }
}

enum class BinaryKind { add, sub, mul };

Tensor binary(const char* name, BinaryKind kind, const Tensor& a, const Tensor& b) {
  require_broadcast(name, a, b);
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  const bool same = a.shape() == b.shape();
  auto apply = [&](std::size_t i, std::size_t j) {
    switch (kind) {
      case BinaryKind::add: o[i] = x[i] + y[j]; break;
      case BinaryKind::sub: o[i] = x[i] - y[j]; break;
      case BinaryKind::mul: o[i] = x[i] * y[j]; break;
    }
  };
  if (same) {
    for (std::size_t i = 0; i < o.size(); ++i) apply(i, i);
  } else {
    for_each_broadcast(a.shape(), b.shape(), apply);
  }
  return finish(out, {a, b}, [a, b, kind, same](Tensor out) {
    return [a, b, out, kind, same]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        if (kind == BinaryKind::mul) {
          auto y = b.data();
          if (same) {
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
          } else {
            for_each_broadcast(a.shape(), b.shape(),
                               [&](std::size_t i, std::size_t j) { ga[i] += g[i] * y[j]; });
          }
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        auto x = a.data();
        auto accum = [&](std::size_t i, std::size_t j) {
          switch (kind) {
            case BinaryKind::add: gb[j] += g[i]; break;
            case BinaryKind::sub: gb[j] -= g[i]; break;
            case BinaryKind::mul: gb[j] += g[i] * x[i]; break;
          }
        };
        if (same) {
          for (std::size_t i = 0; i < g.size(); ++i) accum(i, i);
        } else {
          for_each_broadcast(a.shape(), b.shape(), accum);
        }
      }
    };
  });
}

}  // namespace

bool broadcastable(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  const std::size_t off = a.size() - b.size();
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[i] != a[off + i] && b[i] != 1) return false;
  }
  return true;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinaryKind::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinaryKind::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinaryKind::mul, a, b); }

Tensor scale(const Tensor& a, double factor) {
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  return finish(out, {a}, [a, factor](Tensor out) {
    return [a, out, factor]() mutable {
      auto g = out.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    };
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + value;
  return finish(out, {a}, [a](Tensor out) {
    return [a, out]() mutable {
      auto g = out.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    };
  });
}

Tensor abs(const Tensor& a) {
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::abs(x[i]);
  return finish(out, {a}, [a](Tensor out) {
    return [a, out]() mutable {
      auto g = out.grad();
      auto x = a.data();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += x[i] > 0.0 ? g[i] : (x[i] < 0.0 ? -g[i] : 0.0);
      }
    };
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  bool shared_b = false;
  Shape out_shape;
  if (a.rank() == 2 && b.rank() == 2) {
    m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
      throw ShapeError("matmul inner dimension mismatch " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    }
    out_shape = {m, n};
  } else if (a.rank() == 3 && (b.rank() == 3 || b.rank() == 2)) {
    batch = a.dim(0), m = a.dim(1), k = a.dim(2);
    shared_b = b.rank() == 2;
    const std::size_t bk = shared_b ? b.dim(0) : b.dim(1);
    n = shared_b ? b.dim(1) : b.dim(2);
    if (bk != k || (!shared_b && b.dim(0) != batch)) {
      throw ShapeError("matmul inner dimension mismatch " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    }
    out_shape = {batch, m, n};
  } else {
    throw ShapeError("matmul unsupported ranks " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tensor out(out_shape);
  const std::size_t b_step = shared_b ? 0 : k * n;
  for (std::size_t i = 0; i < batch; ++i) {
    gemm(false, false, m, n, k, a.data().data() + i * m * k, b.data().data() + i * b_step,
         out.data().data() + i * m * n, false);
  }
  return finish(out, {a, b}, [=](Tensor out) {
    return [=]() mutable {
      const double* g = out.grad().data();
      if (a.requires_grad()) {
        double* ga = a.grad_buffer().data();
        for (std::size_t i = 0; i < batch; ++i) {
          gemm(false, true, m, k, n, g + i * m * n, b.data().data() + i * b_step,
               ga + i * m * k, true);
        }
      }
      if (b.requires_grad()) {
        double* gb = b.grad_buffer().data();
        for (std::size_t i = 0; i < batch; ++i) {
          gemm(true, false, k, n, m, a.data().data() + i * m * k, g + i * m * n,
               gb + i * b_step, true);
        }
      }
    };
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const std::size_t r = a.rank();
  if (axes.size() != r) throw ShapeError("permute: axes rank mismatch");
  std::vector<bool> seen(r, false);
  for (auto ax : axes) {
    if (ax >= r || seen[ax]) throw ShapeError("permute: invalid axes");
    seen[ax] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.dim(axes[i]);
  // in_strides[i]: stride in a of the axis that becomes output axis i.
  std::vector<std::size_t> a_strides(r);
  std::size_t s = 1;
  for (std::size_t i = r; i-- > 0;) {
    a_strides[i] = s;
    s *= a.dim(i);
  }
  Shape perm_strides(r);
  for (std::size_t i = 0; i < r; ++i) perm_strides[i] = a_strides[axes[i]];
  // Map output flat index -> input flat index.
  const Dims4 od = pad4(out_shape);
  Dims4 ps{0, 0, 0, 0};
  for (std::size_t i = 0; i < r; ++i) ps[4 - r + i] = perm_strides[i];
  auto index_map = std::make_shared<std::vector<std::size_t>>(a.numel());
  {
    std::size_t o = 0;
    for (std::size_t i0 = 0; i0 < od[0]; ++i0)
      for (std::size_t i1 = 0; i1 < od[1]; ++i1)
        for (std::size_t i2 = 0; i2 < od[2]; ++i2)
          for (std::size_t i3 = 0; i3 < od[3]; ++i3, ++o)
            (*index_map)[o] = i0 * ps[0] + i1 * ps[1] + i2 * ps[2] + i3 * ps[3];
  }
  Tensor out(out_shape);
  auto od_ = out.data();
  auto x = a.data();
  for (std::size_t o = 0; o < od_.size(); ++o) od_[o] = x[(*index_map)[o]];
  return finish(out, {a}, [a, index_map](Tensor out) {
    return [a, out, index_map]() mutable {
      auto g = out.grad();
      auto ga = a.grad_buffer();
      for (std::size_t o = 0; o < g.size(); ++o) ga[(*index_map)[o]] += g[o];
    };
  });
}

Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rank();
  if (r < 2) throw ShapeError("transpose needs rank >= 2");
  std::vector<std::size_t> axes(r);
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(a, axes);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  return finish(out, {a}, [a](Tensor out) {
    return [a, out]() mutable {
      auto g = out.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    };
  });
}

namespace {

// outer x axis x inner decomposition of a shape around `axis`.
struct AxisSplit {
  std::size_t outer = 1, axis = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.axis = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of an empty part list");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw ShapeError("concat axis out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      if (i != axis && s[i] != ref[i]) ok = false;
    }
    if (!ok) {
      throw ShapeError("concat shape incompatibility " + shape_str(ref) + " vs " + shape_str(s));
    }
    out_shape[axis] += s[axis];
  }
  Tensor out(out_shape);
  const AxisSplit os = split_at(out_shape, axis);
  auto o = out.data();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const AxisSplit ps = split_at(p.shape(), axis);
    auto x = p.data();
    const std::size_t run = ps.axis * ps.inner;
    for (std::size_t i = 0; i < ps.outer; ++i) {
      std::copy_n(x.begin() + i * run, run, o.begin() + i * os.axis * os.inner + offset * os.inner);
    }
    offset += ps.axis;
  }
  return finish(out, parts, [parts, axis](Tensor out) {
    return [parts, axis, out]() mutable {
      const AxisSplit os = split_at(out.shape(), axis);
      auto g = out.grad();
      std::size_t offset = 0;
      for (auto p : parts) {
        const AxisSplit ps = split_at(p.shape(), axis);
        if (p.requires_grad()) {
          auto gp = p.grad_buffer();
          const std::size_t run = ps.axis * ps.inner;
          for (std::size_t i = 0; i < ps.outer; ++i) {
            const double* src = g.data() + i * os.axis * os.inner + offset * os.inner;
            double* dst = gp.data() + i * run;
            for (std::size_t j = 0; j < run; ++j) dst[j] += src[j];
          }
        }
        offset += ps.axis;
      }
    };
  });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= a.rank()) throw ShapeError("slice axis out of range");
  if (length == 0 || start + length > a.dim(axis)) {
    throw ShapeError("slice range out of bounds for " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  const AxisSplit as = split_at(a.shape(), axis);
  Tensor out(out_shape);
  auto o = out.data();
  auto x = a.data();
  const std::size_t run = length * as.inner;
  for (std::size_t i = 0; i < as.outer; ++i) {
    std::copy_n(x.begin() + i * as.axis * as.inner + start * as.inner, run, o.begin() + i * run);
  }
  return finish(out, {a}, [a, as, start, run](Tensor out) {
    return [a, out, as, start, run]() mutable {
      auto g = out.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < as.outer; ++i) {
        double* dst = ga.data() + i * as.axis * as.inner + start * as.inner;
        const double* src = g.data() + i * run;
        for (std::size_t j = 0; j < run; ++j) dst[j] += src[j];
      }
    };
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  return finish(out, {a}, [a](Tensor out) {
    return [a, out]() mutable {
      const double g = out.grad()[0];
      for (auto& v : a.grad_buffer()) v += g;
    };
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

}  // namespace chmffn
