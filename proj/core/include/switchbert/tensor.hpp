#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "switchbert/error.hpp"

namespace switchbert {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

const char* to_string(DType dtype) noexcept;
DType parse_dtype(const std::string& name);

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::F32 : DType::F64;
}

// Calls f.template operator()<T>() with T matching the runtime dtype.
template <class F>
decltype(auto) dispatch(DType dtype, F&& f) {
  if (dtype == DType::F32) return f.template operator()<float>();
  return f.template operator()<double>();
}

namespace detail {

struct Storage {
  Storage(DType dt, std::size_t n);

  DType dtype;
  std::vector<float> f32;
  std::vector<double> f64;

  template <class T>
  std::vector<T>& get() {
    if constexpr (std::is_same_v<T, float>) return f32;
    else return f64;
  }
  template <class T>
  const std::vector<T>& get() const {
    if constexpr (std::is_same_v<T, float>) return f32;
    else return f64;
  }
  std::size_t size() const { return dtype == DType::F32 ? f32.size() : f64.size(); }
};

struct Node {
  Shape shape;
  DType dtype = DType::F32;
  std::shared_ptr<Storage> data;
  std::unique_ptr<Storage> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  // Gradient buffer, zero-allocated on first use.
  Storage& grad_storage();

  template <class T>
  std::span<const T> values() const {
    return data->get<T>();
  }
  template <class T>
  std::span<T> grad_span() {
    return grad_storage().get<T>();
  }
};

}  // namespace detail

/// Dense row-major tensor taking part in reverse-mode differentiation.
///
/// A Tensor is a shared handle onto a graph node. Values are immutable once an
/// op has produced them; only leaves (parameters, inputs) expose mutable data,
/// for the optimizer and the finite-difference oracle.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, DType dtype = DType::F32);
  static Tensor full(Shape shape, double value, DType dtype = DType::F32);
  static Tensor from_values(Shape shape, std::span<const double> values,
                            DType dtype = DType::F32);
  static Tensor from_values(Shape shape, std::initializer_list<double> values,
                            DType dtype = DType::F32);
  static Tensor scalar(double value, DType dtype = DType::F32);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  DType dtype() const;

  template <class T>
  std::span<const T> data() const {
    check_dtype(dtype_of<T>());
    return node_->data->get<T>();
  }
  // Only leaves may be written; graph outputs are immutable.
  template <class T>
  std::span<T> mutable_data() {
    check_dtype(dtype_of<T>());
    check_leaf();
    return node_->data->get<T>();
  }

  double item() const;
  double at(std::size_t flat_index) const;
  void set(std::size_t flat_index, double value);
  std::vector<double> values() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool enabled);
  bool is_leaf() const;

  bool has_grad() const;
  std::vector<double> grad_values() const;
  template <class T>
  std::span<const T> grad() const {
    check_dtype(dtype_of<T>());
    return node_->grad_storage().get<T>();
  }
  void zero_grad();

  /// Accumulates d(this)/d(leaf) into every grad-enabled ancestor.
  void backward() const;

  /// Same values, no history, shares storage.
  Tensor detach() const;
  /// Independent deep copy as a leaf (grad flag preserved).
  Tensor clone() const;
  /// Copy converted to another dtype, as a leaf.
  Tensor to(DType dtype) const;

  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }
  bool shares_storage(const Tensor& other) const noexcept;

  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }

 private:
  void check_dtype(DType expected) const;
  void check_leaf() const;

  std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_recording_enabled() noexcept;

namespace detail {

// Creates an op output. Parents are recorded (and backward attached) only when
// recording is enabled and some parent requires grad.
Tensor make_result(Shape shape, DType dtype, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward_fn);

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op);

}  // namespace detail

}  // namespace switchbert
