#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace chmffn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor of doubles with an optional gradient buffer.
///
/// Tensor is a reference-counted handle: copying a Tensor shares storage,
/// which is how parameters stay attached to the operations recorded on a
/// Tape. Use clone() for an independent deep copy. Ranks 1 to 4 are
/// supported; a scalar is shape {1}.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }
  static Tensor of(Shape shape, std::initializer_list<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const;

  std::span<double> data();
  std::span<const double> data() const;
  double item() const;
  double& operator[](std::size_t i) { return data()[i]; }
  double operator[](std::size_t i) const { return data()[i]; }
  double at(std::initializer_list<std::size_t> index) const;
  double& at(std::initializer_list<std::size_t> index);

  bool requires_grad() const;
  void set_requires_grad(bool on);
  // True when the tensor was produced by a recorded operation.
  bool is_leaf() const;

  bool has_grad() const;
  std::span<double> grad();
  std::span<const double> grad() const;
  // Allocates a zeroed gradient buffer if absent.
  // Shared-handle semantics: callable through a const handle.
  std::span<double> grad_buffer() const;
  void zero_grad();

  Tensor clone() const;
  Tensor detach() const { return clone(); }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  // Used by op implementations; not part of the user-facing surface.
  void mark_nonleaf();

 private:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    bool leaf = true;
  };
  std::size_t flat_index(std::initializer_list<std::size_t> index) const;
  Impl& impl();
  const Impl& impl() const;

  std::shared_ptr<Impl> impl_;
};

// Bitwise equality of shape and data.
bool identical(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace chmffn
