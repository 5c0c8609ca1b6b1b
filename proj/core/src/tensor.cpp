#include "chmffn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "chmffn/error.hpp"

namespace chmffn {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > 4) {
    throw ShapeError("tensor rank must be 1..4, got shape " + shape_str(shape));
  }
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
  validate_shape(shape);
  impl_ = std::make_shared<Impl>();
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  validate_shape(shape);
  if (data.size() != shape_numel(shape)) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  impl_ = std::make_shared<Impl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::of(Shape shape, std::initializer_list<double> values) {
  return Tensor(std::move(shape), std::vector<double>(values));
}

Tensor::Impl& Tensor::impl() {
  if (!impl_) throw Error("use of undefined tensor");
  return *impl_;
}

const Tensor::Impl& Tensor::impl() const {
  if (!impl_) throw Error("use of undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t i) const {
  const auto& s = shape();
  if (i >= s.size()) throw ShapeError("dimension index out of range for " + shape_str(s));
  return s[i];
}

std::size_t Tensor::numel() const { return impl().data.size(); }

std::span<double> Tensor::data() { return impl().data; }
std::span<const double> Tensor::data() const { return impl().data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
  return impl().data[0];
}

std::size_t Tensor::flat_index(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for " + shape_str(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) throw ShapeError("index out of range for " + shape_str(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return flat;
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  return impl().data[flat_index(index)];
}

double& Tensor::at(std::initializer_list<std::size_t> index) {
  return impl().data[flat_index(index)];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }
void Tensor::set_requires_grad(bool on) { impl().requires_grad = on; }
bool Tensor::is_leaf() const { return impl().leaf; }
void Tensor::mark_nonleaf() {
  impl().leaf = false;
  impl().requires_grad = true;
}

bool Tensor::has_grad() const { return !impl().grad.empty(); }
std::span<double> Tensor::grad() { return impl().grad; }
std::span<const double> Tensor::grad() const { return impl().grad; }

std::span<double> Tensor::grad_buffer() const {
  auto& im = const_cast<Impl&>(impl());
  if (im.grad.empty()) im.grad.assign(im.data.size(), 0.0);
  return im.grad;
}

void Tensor::zero_grad() {
  auto& im = impl();
  std::fill(im.grad.begin(), im.grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  const auto& im = impl();
  return Tensor(im.shape, im.data, false);
}

bool identical(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  double m = 0.0;
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) m = std::max(m, std::abs(da[i] - db[i]));
  return m;
}

}  // namespace chmffn
