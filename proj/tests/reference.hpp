#pragma once

// Plain-loop single-stream BERT encoder used as an oracle. Nothing here goes
// through the tensor ops; weights are read out of the model as raw values.

#include <cmath>
#include <cstddef>
#include <vector>

#include "switchbert/encoder.hpp"

namespace switchbert::ref {

/// Reachability read straight off the mode table: under SelfSelf both
/// modalities see themselves, SelfCross lets text see only the image,
/// CrossSelf lets the image see only the text, Joint sees everything.
inline bool mode_allowed(InteractionMode m, std::size_t n_img, std::size_t row, std::size_t col) {
  const bool row_img = row < n_img, col_img = col < n_img;
  switch (m) {
    case InteractionMode::SelfSelf: return row_img == col_img;
    case InteractionMode::SelfCross: return col_img;
    case InteractionMode::CrossSelf: return !col_img;
    default: return true;
  }
}

template <class T>
struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<T> v;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, T(0)) {}
  T& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  T operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

template <class T>
Mat<T> from_tensor(const Tensor& t) {
  const auto vals = t.values();
  Mat<T> m(t.rank() == 1 ? 1 : t.dim(0), t.rank() == 1 ? t.dim(0) : t.dim(1));
  for (std::size_t i = 0; i < vals.size(); ++i) m.v[i] = static_cast<T>(vals[i]);
  return m;
}

template <class T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b) {
  Mat<T> c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      T s = 0;
      for (std::size_t k = 0; k < a.cols; ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

template <class T>
void add_row_bias(Mat<T>& x, const Mat<T>& bias) {
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) x(i, j) += bias.v[j];
}

template <class T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& gain, const Mat<T>& bias, double eps) {
  Mat<T> y(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) mean += x(i, j);
    mean /= static_cast<double>(x.cols);
    double var = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= static_cast<double>(x.cols);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < x.cols; ++j)
      y(i, j) = static_cast<T>((x(i, j) - mean) * inv * gain.v[j] + bias.v[j]);
  }
  return y;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

/// Multi-head attention; allowed (row-major n×n) may be empty for all-ones.
template <class T>
Mat<T> mha(const Mat<T>& x, const LayerParams& p, const std::vector<std::uint8_t>& allowed = {}) {
  const std::size_t n = x.rows, d = x.cols, h = p.heads, dh = d / h;
  const Mat<T> q = matmul(x, from_tensor<T>(p.wq));
  const Mat<T> k = matmul(x, from_tensor<T>(p.wk));
  const Mat<T> v = matmul(x, from_tensor<T>(p.wv));
  Mat<T> heads(n, d);
  for (std::size_t head = 0; head < h; ++head) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n);
      double mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += q(i, head * dh + c) * k(j, head * dh + c);
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        if (!allowed.empty() && !allowed[i * n + j]) s[j] -= 1e9;
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += s[j] / z * v(j, head * dh + c);
        heads(i, head * dh + c) = static_cast<T>(acc);
      }
    }
  }
  Mat<T> out = matmul(heads, from_tensor<T>(p.wo));
  add_row_bias(out, from_tensor<T>(p.bo));
  return out;
}

/// LN2(x1 + FFN(x1)) with x1 = LN1(x + MHA(x)).
template <class T>
Mat<T> vanilla_layer(const Mat<T>& x, const LayerParams& p,
                     const std::vector<std::uint8_t>& allowed = {}) {
  Mat<T> a = mha(x, p, allowed);
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += x.v[i];
  const Mat<T> x1 = layer_norm(a, from_tensor<T>(p.ln1_gain), from_tensor<T>(p.ln1_bias), p.ln_eps);
  Mat<T> hdn = matmul(x1, from_tensor<T>(p.w1));
  add_row_bias(hdn, from_tensor<T>(p.b1));
  for (auto& e : hdn.v) e = static_cast<T>(gelu(e));
  Mat<T> f = matmul(hdn, from_tensor<T>(p.w2));
  add_row_bias(f, from_tensor<T>(p.b2));
  for (std::size_t i = 0; i < f.v.size(); ++i) f.v[i] += x1.v[i];
  return layer_norm(f, from_tensor<T>(p.ln2_gain), from_tensor<T>(p.ln2_bias), p.ln_eps);
}

template <class T>
Mat<T> embed_visual(const MultimodalSample& s, const EmbeddingParams& e, double eps) {
  const std::size_t d = e.img_embed.numel(), di = e.feat_w.dim(0);
  const Mat<T> fw = from_tensor<T>(e.feat_w), fb = from_tensor<T>(e.feat_b);
  const Mat<T> bw = from_tensor<T>(e.box_w), bb = from_tensor<T>(e.box_b);
  const Mat<T> img = from_tensor<T>(e.img_embed), vt = from_tensor<T>(e.visual_type);
  Mat<T> x(s.regions + 1, d);
  for (std::size_t j = 0; j < d; ++j) x(0, j) = img.v[j] + vt.v[j];
  for (std::size_t r = 0; r < s.regions; ++r)
    for (std::size_t j = 0; j < d; ++j) {
      T f = 0, b = 0;
      for (std::size_t k = 0; k < di; ++k) f += static_cast<T>(s.features[r * di + k]) * fw(k, j);
      for (std::size_t k = 0; k < 4; ++k) b += static_cast<T>(s.boxes[r * 4 + k]) * bw(k, j);
      x(r + 1, j) = (f + fb.v[j]) + (b + bb.v[j]) + vt.v[j];
    }
  return layer_norm(x, from_tensor<T>(e.vis_ln_gain), from_tensor<T>(e.vis_ln_bias), eps);
}

template <class T>
Mat<T> embed_text(const MultimodalSample& s, const EmbeddingParams& e, double eps) {
  const std::size_t d = e.img_embed.numel();
  const Mat<T> tok = from_tensor<T>(e.token_table), pos = from_tensor<T>(e.position_table);
  const Mat<T> tt = from_tensor<T>(e.text_type);
  Mat<T> x(s.tokens.size(), d);
  for (std::size_t i = 0; i < s.tokens.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) x(i, j) = tok(s.tokens[i], j) + pos(i, j) + tt.v[j];
  return layer_norm(x, from_tensor<T>(e.txt_ln_gain), from_tensor<T>(e.txt_ln_bias), eps);
}

/// Embeddings, then L vanilla layers over the concatenated [image; text].
template <class T>
Mat<T> vanilla_encoder(const SwitchBertModel& model, const MultimodalSample& s) {
  const double eps = model.config().ln_eps;
  const Mat<T> xi = embed_visual<T>(s, model.embeddings(), eps);
  const Mat<T> xt = embed_text<T>(s, model.embeddings(), eps);
  Mat<T> x(xi.rows + xt.rows, xi.cols);
  std::copy(xi.v.begin(), xi.v.end(), x.v.begin());
  std::copy(xt.v.begin(), xt.v.end(), x.v.begin() + static_cast<std::ptrdiff_t>(xi.v.size()));
  for (std::size_t l = 1; l <= model.config().layers; ++l)
    x = vanilla_layer(x, model.layer(static_cast<int>(l)));
  return x;
}

}  // namespace switchbert::ref
