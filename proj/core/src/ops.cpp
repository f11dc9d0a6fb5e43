#include "switchbert/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace switchbert {

namespace {

thread_local std::uint64_t g_forward_flops = 0;

constexpr double kMaskedLogit = -1e9;

template <class T>
std::span<T> out_span(Tensor& t) {
  return t.node()->data->get<T>();
}

template <class T>
std::span<const T> in_span(const detail::Node& n) {
  return n.data->get<T>();
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(x.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  detail::check_same_dtype(a, b, op);
}

std::size_t last_dim(const Tensor& x) { return x.shape().back(); }

// C[m×n] = A[m×k]·B[k×n]; each C[i][j] sums over k in ascending order, in
// double for either element type.
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
    }
    std::copy(acc.begin(), acc.end(), c + i * n);
  }
}

// C[m×n] = A[k×m]ᵀ·B[k×n].
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::fill(c, c + m * n, T(0));
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void transpose_into(const T* x, T* out, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = x[i * cols + j];
}

// C[m×n] = A[m×k]·B[n×k]ᵀ.
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<T> bt(k * n);
  transpose_into(b, bt.data(), n, k);
  gemm_nn(a, bt.data(), c, m, k, n);
}

template <class T>
void accumulate(std::span<T> dst, const std::vector<T>& src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

template <class T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(M_SQRT1_2)));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014327);
  return cdf + x * pdf;
}

template <class T>
void softmax_row(const T* x, const std::uint8_t* allowed, T* y, std::size_t n) {
  std::vector<double> e(n);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    e[j] = (allowed && !allowed[j]) ? x[j] + kMaskedLogit : x[j];
    mx = std::max(mx, e[j]);
  }
  double total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    e[j] = std::exp(e[j] - mx);
    total += e[j];
  }
  for (std::size_t j = 0; j < n; ++j) y[j] = static_cast<T>(e[j] / total);
}

// Shared backward for softmax outputs: dx = y ⊙ (dy − Σ dy⊙y).
template <class T>
void softmax_backward(detail::Node& self) {
  auto& px = *self.parents[0];
  if (!px.requires_grad) return;
  const auto y = in_span<T>(self);
  const auto dy = self.grad_span<T>();
  auto dx = px.grad_span<T>();
  const std::size_t n = self.shape.back();
  const std::size_t rows = y.size() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    T dot = 0;
    for (std::size_t j = 0; j < n; ++j) dot += dy[r * n + j] * y[r * n + j];
    for (std::size_t j = 0; j < n; ++j) dx[r * n + j] += y[r * n + j] * (dy[r * n + j] - dot);
  }
}

// Elementwise unary op with derivative computed from the input value.
template <class Fwd, class Grad>
Tensor unary(const Tensor& x, Fwd fwd, Grad grad) {
  Tensor out = detail::make_result(x.shape(), x.dtype(), {x}, [grad](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      const auto xv = in_span<T>(px);
      const auto dy = self.grad_span<T>();
      auto dx = px.grad_span<T>();
      for (std::size_t i = 0; i < xv.size(); ++i) dx[i] += dy[i] * grad(xv[i]);
    });
  });
  dispatch(x.dtype(), [&]<class T>() {
    const auto xv = x.data<T>();
    auto y = out_span<T>(out);
    for (std::size_t i = 0; i < xv.size(); ++i) y[i] = fwd(xv[i]);
  });
  return out;
}

}  // namespace

std::uint64_t forward_matmul_flops() noexcept { return g_forward_flops; }
void reset_forward_matmul_flops() noexcept { g_forward_flops = 0; }

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  detail::check_same_dtype(a, b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = detail::make_result({m, n}, a.dtype(), {a, b}, [m, k, n](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      const auto dc = self.grad_span<T>();
      if (pa.requires_grad) {  // dA = dC·Bᵀ
        std::vector<T> tmp(m * k);
        gemm_nt(dc.data(), in_span<T>(pb).data(), tmp.data(), m, n, k);
        accumulate(pa.grad_span<T>(), tmp);
      }
      if (pb.requires_grad) {  // dB = Aᵀ·dC
        std::vector<T> tmp(k * n);
        gemm_tn(in_span<T>(pa).data(), dc.data(), tmp.data(), k, m, n);
        accumulate(pb.grad_span<T>(), tmp);
      }
    });
  });
  dispatch(a.dtype(), [&]<class T>() {
    gemm_nn(a.data<T>().data(), b.data<T>().data(), out_span<T>(out).data(), m, k, n);
  });
  g_forward_flops += 2ull * m * n * k;
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  if (a.dim(1) != b.dim(1))
    throw DimensionError("matmul_nt: inner dimensions differ, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()) + "ᵀ");
  detail::check_same_dtype(a, b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor out = detail::make_result({m, n}, a.dtype(), {a, b}, [m, k, n](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      const auto dc = self.grad_span<T>();
      if (pa.requires_grad) {  // dA = dC·B
        std::vector<T> tmp(m * k);
        gemm_nn(dc.data(), in_span<T>(pb).data(), tmp.data(), m, n, k);
        accumulate(pa.grad_span<T>(), tmp);
      }
      if (pb.requires_grad) {  // dB = dCᵀ·A
        std::vector<T> tmp(n * k);
        gemm_tn(dc.data(), in_span<T>(pa).data(), tmp.data(), n, m, k);
        accumulate(pb.grad_span<T>(), tmp);
      }
    });
  });
  dispatch(a.dtype(), [&]<class T>() {
    gemm_nt(a.data<T>().data(), b.data<T>().data(), out_span<T>(out).data(), m, k, n);
  });
  g_forward_flops += 2ull * m * n * k;
  return out;
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor out = detail::make_result({c, r}, x.dtype(), {x}, [r, c](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      const auto dy = self.grad_span<T>();
      auto dx = px.grad_span<T>();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += dy[j * r + i];
    });
  });
  dispatch(x.dtype(), [&]<class T>() {
    transpose_into(x.data<T>().data(), out_span<T>(out).data(), r, c);
  });
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_rowvec(matmul(x, w), b);
}

// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = detail::make_result(a.shape(), a.dtype(), {a, b}, [](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      const auto dy = self.grad_span<T>();
      for (auto& p : self.parents) {
        if (!p->requires_grad) continue;
        auto dx = p->grad_span<T>();
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
      }
    });
  });
  dispatch(a.dtype(), [&]<class T>() {
    const auto av = a.data<T>();
    const auto bv = b.data<T>();
    auto y = out_span<T>(out);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = detail::make_result(a.shape(), a.dtype(), {a, b}, [](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      const auto dy = self.grad_span<T>();
      if (self.parents[0]->requires_grad) {
        auto dx = self.parents[0]->grad_span<T>();
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
      }
      if (self.parents[1]->requires_grad) {
        auto dx = self.parents[1]->grad_span<T>();
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] -= dy[i];
      }
    });
  });
  dispatch(a.dtype(), [&]<class T>() {
    const auto av = a.data<T>();
    const auto bv = b.data<T>();
    auto y = out_span<T>(out);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] - bv[i];
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = detail::make_result(a.shape(), a.dtype(), {a, b}, [](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      const auto dy = self.grad_span<T>();
      const auto av = in_span<T>(pa);
      const auto bv = in_span<T>(pb);
      if (pa.requires_grad) {
        auto dx = pa.grad_span<T>();
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * bv[i];
      }
      if (pb.requires_grad) {
        auto dx = pb.grad_span<T>();
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * av[i];
      }
    });
  });
  dispatch(a.dtype(), [&]<class T>() {
    const auto av = a.data<T>();
    const auto bv = b.data<T>();
    auto y = out_span<T>(out);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  });
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out = detail::make_result(x.shape(), x.dtype(), {x}, [factor](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      const auto dy = self.grad_span<T>();
      auto dx = px.grad_span<T>();
      const T f = static_cast<T>(factor);
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * f;
    });
  });
  dispatch(x.dtype(), [&]<class T>() {
    const auto xv = x.data<T>();
    auto y = out_span<T>(out);
    const T f = static_cast<T>(factor);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * f;
  });
  return out;
}

Tensor add_scalar(const Tensor& x, double value) {
  Tensor out = detail::make_result(x.shape(), x.dtype(), {x}, [](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      const auto dy = self.grad_span<T>();
      auto dx = px.grad_span<T>();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    });
  });
  dispatch(x.dtype(), [&]<class T>() {
    const auto xv = x.data<T>();
    auto y = out_span<T>(out);
    const T v = static_cast<T>(value);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] + v;
  });
  return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  detail::check_same_dtype(x, v, "add_rowvec");
  const std::size_t d = last_dim(x);
  if (v.numel() != d)
    throw DimensionError("add_rowvec: vector " + shape_str(v.shape()) + " does not match " +
                         shape_str(x.shape()));
  Tensor out = detail::make_result(x.shape(), x.dtype(), {x, v}, [d](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      const auto dy = self.grad_span<T>();
      const std::size_t rows = dy.size() / d;
      if (self.parents[0]->requires_grad) {
        auto dx = self.parents[0]->grad_span<T>();
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
      }
      if (self.parents[1]->requires_grad) {
        auto dv = self.parents[1]->grad_span<T>();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) dv[j] += dy[r * d + j];
      }
    });
  });
  dispatch(x.dtype(), [&]<class T>() {
    const auto xv = x.data<T>();
    const auto vv = v.data<T>();
    auto y = out_span<T>(out);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] + vv[i % d];
  });
  return out;
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
  detail::check_same_dtype(x, v, "mul_rowvec");
  const std::size_t d = last_dim(x);
  if (v.numel() != d)
    throw DimensionError("mul_rowvec: vector " + shape_str(v.shape()) + " does not match " +
                         shape_str(x.shape()));
  Tensor out = detail::make_result(x.shape(), x.dtype(), {x, v}, [d](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      auto& px = *self.parents[0];
      auto& pv = *self.parents[1];
      const auto dy = self.grad_span<T>();
      const auto xv = in_span<T>(px);
      const auto vv = in_span<T>(pv);
      const std::size_t rows = dy.size() / d;
      if (px.requires_grad) {
        auto dx = px.grad_span<T>();
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * vv[i % d];
      }
      if (pv.requires_grad) {
        auto dv = pv.grad_span<T>();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) dv[j] += dy[r * d + j] * xv[r * d + j];
      }
    });
  });
  dispatch(x.dtype(), [&]<class T>() {
    const auto xv = x.data<T>();
    const auto vv = v.data<T>();
    auto y = out_span<T>(out);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * vv[i % d];
  });
  return out;
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  detail::check_same_dtype(x, s, "mul_scalar");
  if (s.numel() != 1) throw DimensionError("mul_scalar: factor must hold one element");
  Tensor out = detail::make_result(x.shape(), x.dtype(), {x, s}, [](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      auto& px = *self.parents[0];
      auto& ps = *self.parents[1];
      const auto dy = self.grad_span<T>();
      const auto xv = in_span<T>(px);
      const T sv = in_span<T>(ps)[0];
      if (px.requires_grad) {
        auto dx = px.grad_span<T>();
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * sv;
      }
      if (ps.requires_grad) {
        T acc = 0;
        for (std::size_t i = 0; i < dy.size(); ++i) acc += dy[i] * xv[i];
        ps.grad_span<T>()[0] += acc;
      }
    });
  });
  dispatch(x.dtype(), [&]<class T>() {
    const auto xv = x.data<T>();
    const T sv = s.data<T>()[0];
    auto y = out_span<T>(out);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * sv;
  });
  return out;
}

Tensor div_scalar(const Tensor& x, const Tensor& s) {
  detail::check_same_dtype(x, s, "div_scalar");
  if (s.numel() != 1) throw DimensionError("div_scalar: divisor must hold one element");
  Tensor out = detail::make_result(x.shape(), x.dtype(), {x, s}, [](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      auto& px = *self.parents[0];
      auto& ps = *self.parents[1];
      const auto dy = self.grad_span<T>();
      const auto y = in_span<T>(self);
      const T sv = in_span<T>(ps)[0];
      if (px.requires_grad) {
        auto dx = px.grad_span<T>();
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] / sv;
      }
      if (ps.requires_grad) {
        T acc = 0;
        for (std::size_t i = 0; i < dy.size(); ++i) acc += dy[i] * y[i];
        ps.grad_span<T>()[0] -= acc / sv;
      }
    });
  });
  dispatch(x.dtype(), [&]<class T>() {
    const auto xv = x.data<T>();
    const T sv = s.data<T>()[0];
    auto y = out_span<T>(out);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] / sv;
  });
  return out;
}

Tensor mul_const(const Tensor& x, std::span<const double> m) {
  if (m.size() != x.numel())
    throw DimensionError("mul_const: mask size " + std::to_string(m.size()) + " vs " +
                         shape_str(x.shape()));
  auto mask = std::make_shared<std::vector<double>>(m.begin(), m.end());
  Tensor out = detail::make_result(x.shape(), x.dtype(), {x}, [mask](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      const auto dy = self.grad_span<T>();
      auto dx = px.grad_span<T>();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * static_cast<T>((*mask)[i]);
    });
  });
  dispatch(x.dtype(), [&]<class T>() {
    const auto xv = x.data<T>();
    auto y = out_span<T>(out);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * static_cast<T>((*mask)[i]);
  });
  return out;
}

Tensor mask_rows(const Tensor& x, std::span<const std::uint8_t> keep) {
  require_rank(x, 2, "mask_rows");
  if (keep.size() != x.dim(0))
    throw DimensionError("mask_rows: " + std::to_string(keep.size()) + " flags for " +
                         shape_str(x.shape()));
  const std::size_t d = x.dim(1);
  auto flags = std::make_shared<std::vector<std::uint8_t>>(keep.begin(), keep.end());
  Tensor out = detail::make_result(x.shape(), x.dtype(), {x}, [flags, d](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      const auto dy = self.grad_span<T>();
      auto dx = px.grad_span<T>();
      for (std::size_t r = 0; r < flags->size(); ++r)
        if ((*flags)[r])
          for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += dy[r * d + j];
    });
  });
  dispatch(x.dtype(), [&]<class T>() {
    const auto xv = x.data<T>();
    auto y = out_span<T>(out);
    for (std::size_t r = 0; r < flags->size(); ++r)
      if ((*flags)[r])
        for (std::size_t j = 0; j < d; ++j) y[r * d + j] = xv[r * d + j];
  });
  return out;
}

Tensor gelu(const Tensor& x) {
  return unary(
      x, []<class T>(T v) { return gelu_value(v); }, []<class T>(T v) { return gelu_grad(v); });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, []<class T>(T v) { return std::exp(v); }, []<class T>(T v) { return std::exp(v); });
}

Tensor log_clamped(const Tensor& x, double floor) {
  return unary(
      x,
      [floor]<class T>(T v) { return std::log(std::max(v, static_cast<T>(floor))); },
      [floor]<class T>(T v) { return v > static_cast<T>(floor) ? T(1) / v : T(0); });
}

// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  Tensor out = detail::make_result({1}, x.dtype(), {x}, [](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      const T g = self.grad_span<T>()[0];
      auto dx = px.grad_span<T>();
      for (auto& v : dx) v += g;
    });
  });
  dispatch(x.dtype(), [&]<class T>() {
    T acc = 0;
    for (T v : x.data<T>()) acc += v;
    out_span<T>(out)[0] = acc;
  });
  return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mean_rows(const Tensor& x, std::span<const std::uint8_t> keep) {
  require_rank(x, 2, "mean_rows");
  if (keep.size() != x.dim(0))
    throw DimensionError("mean_rows: " + std::to_string(keep.size()) + " flags for " +
                         shape_str(x.shape()));
  std::size_t count = 0;
  for (auto k : keep) count += k ? 1 : 0;
  if (count == 0) throw DegenerateInputError("mean_rows: every row is padding");
  const std::size_t d = x.dim(1);
  auto flags = std::make_shared<std::vector<std::uint8_t>>(keep.begin(), keep.end());
  Tensor out = detail::make_result({d}, x.dtype(), {x}, [flags, d, count](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      const auto dy = self.grad_span<T>();
      auto dx = px.grad_span<T>();
      const T inv = T(1) / static_cast<T>(count);
      for (std::size_t r = 0; r < flags->size(); ++r)
        if ((*flags)[r])
          for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += dy[j] * inv;
    });
  });
  dispatch(x.dtype(), [&]<class T>() {
    const auto xv = x.data<T>();
    auto y = out_span<T>(out);
    for (std::size_t r = 0; r < flags->size(); ++r)
      if ((*flags)[r])
        for (std::size_t j = 0; j < d; ++j) y[j] += xv[r * d + j];
    for (std::size_t j = 0; j < d; ++j) y[j] /= static_cast<T>(count);
  });
  return out;
}

// ---------------------------------------------------------------------------

Tensor softmax_lastdim(const Tensor& x) {
  Tensor out = detail::make_result(x.shape(), x.dtype(), {x}, [](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() { softmax_backward<T>(self); });
  });
  dispatch(x.dtype(), [&]<class T>() {
    const std::size_t n = last_dim(x);
    const auto xv = x.data<T>();
    auto y = out_span<T>(out);
    for (std::size_t r = 0; r < xv.size() / n; ++r)
      softmax_row<T>(xv.data() + r * n, nullptr, y.data() + r * n, n);
  });
  return out;
}

Tensor masked_softmax_lastdim(const Tensor& x, std::span<const std::uint8_t> allowed) {
  if (allowed.size() != x.numel())
    throw DimensionError("masked_softmax: mask has " + std::to_string(allowed.size()) +
                         " entries for " + shape_str(x.shape()));
  Tensor out = detail::make_result(x.shape(), x.dtype(), {x}, [](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() { softmax_backward<T>(self); });
  });
  dispatch(x.dtype(), [&]<class T>() {
    const std::size_t n = last_dim(x);
    const auto xv = x.data<T>();
    auto y = out_span<T>(out);
    for (std::size_t r = 0; r < xv.size() / n; ++r)
      softmax_row<T>(xv.data() + r * n, allowed.data() + r * n, y.data() + r * n, n);
  });
  return out;
}

Tensor log_softmax_lastdim(const Tensor& x) {
  const std::size_t n = last_dim(x);
  Tensor out = detail::make_result(x.shape(), x.dtype(), {x}, [n](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      const auto y = in_span<T>(self);
      const auto dy = self.grad_span<T>();
      auto dx = px.grad_span<T>();
      for (std::size_t r = 0; r < y.size() / n; ++r) {
        T total = 0;
        for (std::size_t j = 0; j < n; ++j) total += dy[r * n + j];
        for (std::size_t j = 0; j < n; ++j)
          dx[r * n + j] += dy[r * n + j] - std::exp(y[r * n + j]) * total;
      }
    });
  });
  dispatch(x.dtype(), [&]<class T>() {
    const auto xv = x.data<T>();
    auto y = out_span<T>(out);
    for (std::size_t r = 0; r < xv.size() / n; ++r) {
      const T* row = xv.data() + r * n;
      T mx = *std::max_element(row, row + n);
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) total += std::exp(row[j] - mx);
      const T lse = mx + std::log(total);
      for (std::size_t j = 0; j < n; ++j) y[r * n + j] = row[j] - lse;
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  detail::check_same_dtype(x, gain, "layer_norm");
  detail::check_same_dtype(x, bias, "layer_norm");
  const std::size_t d = last_dim(x);
  if (gain.numel() != d || bias.numel() != d)
    throw DimensionError("layer_norm: affine parameters do not match " + shape_str(x.shape()));
  if (!(eps > 0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / d;

  // Normalised values and inverse std are kept for the backward pass.
  struct Saved {
    std::vector<double> xhat;
    std::vector<double> rstd;
  };
  auto saved = std::make_shared<Saved>();
  saved->xhat.resize(x.numel());
  saved->rstd.resize(rows);

  Tensor out = detail::make_result(
      x.shape(), x.dtype(), {x, gain, bias}, [saved, d, rows](detail::Node& self) {
        dispatch(self.dtype, [&]<class T>() {
          auto& px = *self.parents[0];
          auto& pg = *self.parents[1];
          auto& pb = *self.parents[2];
          const auto dy = self.grad_span<T>();
          const auto g = in_span<T>(pg);
          if (pg.requires_grad) {
            auto dg = pg.grad_span<T>();
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < d; ++j)
                dg[j] += dy[r * d + j] * static_cast<T>(saved->xhat[r * d + j]);
          }
          if (pb.requires_grad) {
            auto db = pb.grad_span<T>();
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < d; ++j) db[j] += dy[r * d + j];
          }
          if (px.requires_grad) {
            auto dx = px.grad_span<T>();
            for (std::size_t r = 0; r < rows; ++r) {
              T mean_g = 0, mean_gx = 0;
              for (std::size_t j = 0; j < d; ++j) {
                const T gh = dy[r * d + j] * g[j];
                mean_g += gh;
                mean_gx += gh * static_cast<T>(saved->xhat[r * d + j]);
              }
              mean_g /= static_cast<T>(d);
              mean_gx /= static_cast<T>(d);
              const T rs = static_cast<T>(saved->rstd[r]);
              for (std::size_t j = 0; j < d; ++j) {
                const T gh = dy[r * d + j] * g[j];
                dx[r * d + j] +=
                    rs * (gh - mean_g - static_cast<T>(saved->xhat[r * d + j]) * mean_gx);
              }
            }
          }
        });
      });

  dispatch(x.dtype(), [&]<class T>() {
    const auto xv = x.data<T>();
    const auto g = gain.data<T>();
    const auto b = bias.data<T>();
    auto y = out_span<T>(out);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = xv.data() + r * d;
      double mu = 0;
      for (std::size_t j = 0; j < d; ++j) mu += row[j];
      mu /= static_cast<double>(d);
      double var = 0;
      for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
      var /= static_cast<double>(d);
      const double rs = 1.0 / std::sqrt(var + eps);
      saved->rstd[r] = rs;
      for (std::size_t j = 0; j < d; ++j) {
        const double xh = (row[j] - mu) * rs;
        saved->xhat[r * d + j] = xh;
        y[r * d + j] = static_cast<T>(static_cast<double>(g[j]) * xh + static_cast<double>(b[j]));
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank(x, 2, "slice_rows");
  if (begin >= end || end > x.dim(0))
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + shape_str(x.shape()));
  const std::size_t d = x.dim(1);
  Tensor out = detail::make_result({end - begin, d}, x.dtype(), {x}, [begin, d](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      const auto dy = self.grad_span<T>();
      auto dx = px.grad_span<T>();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[begin * d + i] += dy[i];
    });
  });
  dispatch(x.dtype(), [&]<class T>() {
    const auto xv = x.data<T>();
    auto y = out_span<T>(out);
    std::copy(xv.begin() + begin * d, xv.begin() + end * d, y.begin());
  });
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t d = parts[0].dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != d)
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts[0].shape()) +
                           " vs " + shape_str(p.shape()));
    detail::check_same_dtype(parts[0], p, "concat_rows");
    rows += p.dim(0);
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  Tensor out = detail::make_result({rows, d}, parts[0].dtype(), parents, [](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      const auto dy = self.grad_span<T>();
      std::size_t offset = 0;
      for (auto& p : self.parents) {
        const std::size_t n = numel_of(p->shape);
        if (p->requires_grad) {
          auto dx = p->grad_span<T>();
          for (std::size_t i = 0; i < n; ++i) dx[i] += dy[offset + i];
        }
        offset += n;
      }
    });
  });
  dispatch(parts[0].dtype(), [&]<class T>() {
    auto y = out_span<T>(out);
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const auto v = p.data<T>();
      std::copy(v.begin(), v.end(), y.begin() + offset);
      offset += v.size();
    }
  });
  return out;
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank(x, 2, "slice_cols");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (begin >= end || end > cols)
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + shape_str(x.shape()));
  const std::size_t w = end - begin;
  Tensor out = detail::make_result({rows, w}, x.dtype(), {x}, [begin, w, cols, rows](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      const auto dy = self.grad_span<T>();
      auto dx = px.grad_span<T>();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < w; ++j) dx[r * cols + begin + j] += dy[r * w + j];
    });
  });
  dispatch(x.dtype(), [&]<class T>() {
    const auto xv = x.data<T>();
    auto y = out_span<T>(out);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < w; ++j) y[r * w + j] = xv[r * cols + begin + j];
  });
  return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t rows = parts[0].dim(0);
  std::size_t cols = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != rows)
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    detail::check_same_dtype(parts[0], p, "concat_cols");
    cols += p.dim(1);
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  Tensor out = detail::make_result({rows, cols}, parts[0].dtype(), parents, [rows, cols](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      const auto dy = self.grad_span<T>();
      std::size_t offset = 0;
      for (auto& p : self.parents) {
        const std::size_t w = p->shape[1];
        if (p->requires_grad) {
          auto dx = p->grad_span<T>();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j) dx[r * w + j] += dy[r * cols + offset + j];
        }
        offset += w;
      }
    });
  });
  dispatch(parts[0].dtype(), [&]<class T>() {
    auto y = out_span<T>(out);
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const auto v = p.data<T>();
      const std::size_t w = p.dim(1);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < w; ++j) y[r * cols + offset + j] = v[r * w + j];
      offset += w;
    }
  });
  return out;
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  require_rank(table, 2, "gather_rows");
  if (ids.empty()) throw ContractError("gather_rows: empty id list");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (auto id : ids)
    if (id >= vocab)
      throw ContractError("gather_rows: id " + std::to_string(id) + " out of range for table of " +
                          std::to_string(vocab) + " rows");
  auto idx = std::make_shared<std::vector<std::size_t>>(ids.begin(), ids.end());
  Tensor out = detail::make_result({ids.size(), d}, table.dtype(), {table}, [idx, d](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      auto& pt = *self.parents[0];
      if (!pt.requires_grad) return;
      const auto dy = self.grad_span<T>();
      auto dt = pt.grad_span<T>();
      for (std::size_t r = 0; r < idx->size(); ++r)
        for (std::size_t j = 0; j < d; ++j) dt[(*idx)[r] * d + j] += dy[r * d + j];
    });
  });
  dispatch(table.dtype(), [&]<class T>() {
    const auto tv = table.data<T>();
    auto y = out_span<T>(out);
    for (std::size_t r = 0; r < idx->size(); ++r)
      std::copy(tv.begin() + (*idx)[r] * d, tv.begin() + ((*idx)[r] + 1) * d, y.begin() + r * d);
  });
  return out;
}

Tensor pick(const Tensor& x, std::size_t flat_index) {
  if (flat_index >= x.numel())
    throw DimensionError("pick: index " + std::to_string(flat_index) + " out of range for " +
                         shape_str(x.shape()));
  Tensor out = detail::make_result({1}, x.dtype(), {x}, [flat_index](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      auto& px = *self.parents[0];
      if (px.requires_grad) px.grad_span<T>()[flat_index] += self.grad_span<T>()[0];
    });
  });
  dispatch(x.dtype(), [&]<class T>() { out_span<T>(out)[0] = x.data<T>()[flat_index]; });
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Tensor out = detail::make_result(std::move(shape), x.dtype(), {x}, [](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      const auto dy = self.grad_span<T>();
      auto dx = px.grad_span<T>();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    });
  });
  dispatch(x.dtype(), [&]<class T>() {
    const auto xv = x.data<T>();
    std::copy(xv.begin(), xv.end(), out_span<T>(out).begin());
  });
  return out;
}

// ---------------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t rows = logits.dim(0), n = logits.dim(1);
  if (targets.size() != rows)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(logits.shape()));
  for (auto t : targets)
    if (t >= n) throw ContractError("cross_entropy: target " + std::to_string(t) + " out of range");
  auto tgt = std::make_shared<std::vector<std::size_t>>(targets.begin(), targets.end());
  auto probs = std::make_shared<std::vector<double>>(rows * n);
  Tensor out = detail::make_result({1}, logits.dtype(), {logits}, [tgt, probs, rows, n](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      auto& px = *self.parents[0];
      if (!px.requires_grad) return;
      const T g = self.grad_span<T>()[0] / static_cast<T>(rows);
      auto dx = px.grad_span<T>();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) {
          const T target = j == (*tgt)[r] ? T(1) : T(0);
          dx[r * n + j] += g * (static_cast<T>((*probs)[r * n + j]) - target);
        }
    });
  });
  dispatch(logits.dtype(), [&]<class T>() {
    const auto xv = logits.data<T>();
    T total = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = xv.data() + r * n;
      T mx = *std::max_element(row, row + n);
      T z = 0;
      for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
      const T lse = mx + std::log(z);
      for (std::size_t j = 0; j < n; ++j) (*probs)[r * n + j] = std::exp(row[j] - lse);
      total += lse - row[(*tgt)[r]];
    }
    out_span<T>(out)[0] = total / static_cast<T>(rows);
  });
  return out;
}

Tensor bce_with_logits(const Tensor& score, double label) {
  if (score.numel() != 1) throw DimensionError("bce_with_logits: score must hold one element");
  if (label != 0.0 && label != 1.0) throw ContractError("bce_with_logits: label must be 0 or 1");
  Tensor out = detail::make_result({1}, score.dtype(), {score}, [label](detail::Node& self) {
    dispatch(self.dtype, [&]<class T>() {
      auto& ps = *self.parents[0];
      if (!ps.requires_grad) return;
      const T s = in_span<T>(ps)[0];
      const T sig = T(1) / (T(1) + std::exp(-s));
      ps.grad_span<T>()[0] += self.grad_span<T>()[0] * (sig - static_cast<T>(label));
    });
  });
  dispatch(score.dtype(), [&]<class T>() {
    const T s = score.data<T>()[0];
    const T y = static_cast<T>(label);
    out_span<T>(out)[0] = std::max(s, T(0)) - s * y + std::log1p(std::exp(-std::abs(s)));
  });
  return out;
}

}  // namespace switchbert
