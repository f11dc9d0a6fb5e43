#include "switchbert/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace switchbert {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Contract: return "contract";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::DegenerateInput: return "degenerate-input";
    case ErrorKind::Oracle: return "oracle";
    case ErrorKind::Config: return "config";
    case ErrorKind::Format: return "format";
    case ErrorKind::Corruption: return "corruption";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

const char* to_string(DType dtype) noexcept {
  return dtype == DType::F32 ? "f32" : "f64";
}

DType parse_dtype(const std::string& name) {
  if (name == "f32") return DType::F32;
  if (name == "f64") return DType::F64;
  throw ConfigError("unknown dtype '" + name + "' (expected f32 or f64)");
}

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

thread_local bool g_recording = true;

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
  for (auto e : shape)
    if (e == 0) throw DimensionError("tensor extents must be >= 1, got " + shape_str(shape));
}

std::shared_ptr<detail::Node> new_node(Shape shape, DType dtype) {
  validate_shape(shape);
  auto node = std::make_shared<detail::Node>();
  node->data = std::make_shared<detail::Storage>(dtype, numel_of(shape));
  node->shape = std::move(shape);
  node->dtype = dtype;
  return node;
}

}  // namespace

namespace detail {

Storage::Storage(DType dt, std::size_t n) : dtype(dt) {
  if (dt == DType::F32) f32.assign(n, 0.0f);
  else f64.assign(n, 0.0);
}

Storage& Node::grad_storage() {
  if (!grad) grad = std::make_unique<Storage>(dtype, numel_of(shape));
  return *grad;
}

Tensor make_result(Shape shape, DType dtype, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward_fn) {
  auto node = new_node(std::move(shape), dtype);
  if (g_recording) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (auto& p : parents) node->parents.push_back(p.node());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor(std::move(node));
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype())
    throw ContractError(std::string(op) + ": dtype mismatch " + to_string(a.dtype()) +
                        " vs " + to_string(b.dtype()));
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape, DType dtype) { return Tensor(new_node(std::move(shape), dtype)); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t = zeros(std::move(shape), dtype);
  dispatch(dtype, [&]<class T>() {
    auto& v = t.node_->data->get<T>();
    std::fill(v.begin(), v.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, DType dtype) {
  Tensor t = zeros(std::move(shape), dtype);
  if (values.size() != t.numel())
    throw DimensionError("from_values: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(t.shape()));
  dispatch(dtype, [&]<class T>() {
    auto& v = t.node_->data->get<T>();
    for (std::size_t i = 0; i < values.size(); ++i) v[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::from_values(Shape shape, std::initializer_list<double> values, DType dtype) {
  return from_values(std::move(shape), std::span<const double>(values.begin(), values.size()),
                     dtype);
}

Tensor Tensor::scalar(double value, DType dtype) { return full({1}, value, dtype); }

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return numel_of(shape()); }

DType Tensor::dtype() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->dtype;
}

double Tensor::item() const {
  if (numel() != 1)
    throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
  return at(0);
}

double Tensor::at(std::size_t i) const {
  if (i >= numel()) throw DimensionError("index out of range");
  return dispatch(dtype(), [&]<class T>() { return static_cast<double>(node_->data->get<T>()[i]); });
}

void Tensor::set(std::size_t i, double value) {
  check_leaf();
  if (i >= numel()) throw DimensionError("index out of range");
  dispatch(dtype(), [&]<class T>() { node_->data->get<T>()[i] = static_cast<T>(value); });
}

std::vector<double> Tensor::values() const {
  return dispatch(dtype(), [&]<class T>() {
    const auto& v = node_->data->get<T>();
    return std::vector<double>(v.begin(), v.end());
  });
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool enabled) {
  check_leaf();
  node_->requires_grad = enabled;
  return *this;
}

bool Tensor::is_leaf() const { return node_ && node_->parents.empty(); }

bool Tensor::has_grad() const { return node_ && node_->grad; }

std::vector<double> Tensor::grad_values() const {
  if (!has_grad()) return std::vector<double>(numel(), 0.0);
  return dispatch(dtype(), [&]<class T>() {
    const auto& g = node_->grad->get<T>();
    return std::vector<double>(g.begin(), g.end());
  });
}

void Tensor::zero_grad() {
  if (node_) node_->grad.reset();
}

void Tensor::backward() const {
  if (numel() != 1)
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  if (!node_->requires_grad) throw ContractError("backward() on a tensor that does not require grad");

  // Iterative post-order DFS; reversed post-order is a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  dispatch(dtype(), [&]<class T>() { node_->grad_span<T>()[0] += T(1); });
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn && n->grad) n->backward_fn(*n);
    // Interior gradients are not needed once propagated.
    if (!n->parents.empty() && n != node_.get()) n->grad.reset();
  }
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = shape();
  node->dtype = dtype();
  node->data = node_->data;
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = shape();
  node->dtype = dtype();
  node->data = std::make_shared<detail::Storage>(*node_->data);
  node->requires_grad = node_->requires_grad && node_->parents.empty();
  return Tensor(std::move(node));
}

Tensor Tensor::to(DType target) const {
  return from_values(shape(), values(), target);
}

bool Tensor::shares_storage(const Tensor& other) const noexcept {
  return node_ && other.node_ && node_->data == other.node_->data;
}

void Tensor::check_dtype(DType expected) const {
  if (dtype() != expected)
    throw ContractError(std::string("dtype mismatch: tensor is ") + to_string(dtype()) +
                        ", accessed as " + to_string(expected));
}

void Tensor::check_leaf() const {
  if (!node_) throw ContractError("use of undefined tensor");
  if (!node_->parents.empty()) throw ContractError("cannot mutate a non-leaf tensor");
}

NoGradGuard::NoGradGuard() : previous_(g_recording) { g_recording = false; }
NoGradGuard::~NoGradGuard() { g_recording = previous_; }

bool grad_recording_enabled() noexcept { return g_recording; }

}  // namespace switchbert
