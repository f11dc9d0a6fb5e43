#include "switchbert/attention.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "switchbert/ops.hpp"

namespace switchbert {

const char* to_string(InteractionMode mode) noexcept {
  switch (mode) {
    case InteractionMode::SelfSelf: return "M0";
    case InteractionMode::SelfCross: return "M1";
    case InteractionMode::CrossSelf: return "M2";
    case InteractionMode::Joint: return "M3";
  }
  return "M?";
}

InteractionMode parse_mode(const std::string& text) {
  if (text == "M0" || text == "self-self") return InteractionMode::SelfSelf;
  if (text == "M1" || text == "self-cross") return InteractionMode::SelfCross;
  if (text == "M2" || text == "cross-self") return InteractionMode::CrossSelf;
  if (text == "M3" || text == "joint") return InteractionMode::Joint;
  throw ConfigError("unknown interaction mode '" + text + "'");
}

InteractionMode mode_from_index(std::size_t index) {
  if (index >= kNumModes) throw ContractError("mode index " + std::to_string(index) + " out of range");
  return kAllModes[index];
}

AttentionMask build_mode_mask(InteractionMode mode, std::size_t n_img, std::size_t n_txt,
                              std::span<const std::uint8_t> pad) {
  if (n_img == 0 || n_txt == 0)
    throw ContractError("build_mode_mask: both modalities need at least one token");
  const std::size_t n = n_img + n_txt;
  if (!pad.empty() && pad.size() != n)
    throw DimensionError("build_mode_mask: pad vector has " + std::to_string(pad.size()) +
                         " entries for " + std::to_string(n) + " tokens");
  auto is_pad = [&](std::size_t i) { return !pad.empty() && pad[i] != 0; };
  bool img_live = false, txt_live = false;
  for (std::size_t i = 0; i < n_img; ++i) img_live = img_live || !is_pad(i);
  for (std::size_t i = n_img; i < n; ++i) txt_live = txt_live || !is_pad(i);
  if (!img_live || !txt_live)
    throw DegenerateInputError("build_mode_mask: a modality consists only of padding");

  // Which column modality each row modality may attend.
  bool img_to_img = false, img_to_txt = false, txt_to_img = false, txt_to_txt = false;
  switch (mode) {
    case InteractionMode::SelfSelf: img_to_img = txt_to_txt = true; break;
    case InteractionMode::SelfCross: img_to_img = txt_to_img = true; break;
    case InteractionMode::CrossSelf: img_to_txt = txt_to_txt = true; break;
    case InteractionMode::Joint: img_to_img = img_to_txt = txt_to_img = txt_to_txt = true; break;
  }

  AttentionMask mask{n_img, n_txt, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t r = 0; r < n; ++r) {
    const bool row_img = r < n_img;
    for (std::size_t c = 0; c < n; ++c) {
      const bool col_img = c < n_img;
      bool ok = row_img ? (col_img ? img_to_img : img_to_txt) : (col_img ? txt_to_img : txt_to_txt);
      if (is_pad(c)) ok = false;
      mask.allowed[r * n + c] = ok ? 1 : 0;
    }
  }
  return mask;
}

LayerParams make_layer_params(ParamStore& store, const std::string& prefix, std::size_t dim,
                              std::size_t heads, std::size_t ffn_dim, DType dtype, Rng& rng,
                              double init_std, double ln_eps) {
  if (heads == 0 || dim % heads != 0)
    throw ConfigError("head count " + std::to_string(heads) + " must divide model dim " +
                      std::to_string(dim));
  auto normal = [&](Shape shape) {
    Tensor t = Tensor::zeros(std::move(shape), dtype);
    for (std::size_t i = 0; i < t.numel(); ++i) t.set(i, init_std * rng.normal());
    return t;
  };
  LayerParams p;
  p.heads = heads;
  p.ln_eps = ln_eps;
  p.wq = store.add(prefix + ".attn.wq", normal({dim, dim}));
  p.wk = store.add(prefix + ".attn.wk", normal({dim, dim}));
  p.wv = store.add(prefix + ".attn.wv", normal({dim, dim}));
  p.wo = store.add(prefix + ".attn.wo", normal({dim, dim}));
  p.bo = store.add(prefix + ".attn.bo", Tensor::zeros({dim}, dtype));
  p.ln1_gain = store.add(prefix + ".ln1.gain", Tensor::full({dim}, 1.0, dtype));
  p.ln1_bias = store.add(prefix + ".ln1.bias", Tensor::zeros({dim}, dtype));
  p.w1 = store.add(prefix + ".ffn.w1", normal({dim, ffn_dim}));
  p.b1 = store.add(prefix + ".ffn.b1", Tensor::zeros({ffn_dim}, dtype));
  p.w2 = store.add(prefix + ".ffn.w2", normal({ffn_dim, dim}));
  p.b2 = store.add(prefix + ".ffn.b2", Tensor::zeros({dim}, dtype));
  p.ln2_gain = store.add(prefix + ".ln2.gain", Tensor::full({dim}, 1.0, dtype));
  p.ln2_bias = store.add(prefix + ".ln2.bias", Tensor::zeros({dim}, dtype));
  return p;
}

SharedAttention::SharedAttention(const Tensor& x, const LayerParams& params, int layer_index)
    : params_(&params), length_(x.dim(0)) {
  if (x.rank() != 2 || x.dim(1) != params.dim())
    throw DimensionError("attention input " + shape_str(x.shape()) + " does not match model dim " +
                         std::to_string(params.dim()));
  const Tensor q = matmul(x, params.wq);
  const Tensor k = matmul(x, params.wk);
  const Tensor v = matmul(x, params.wv);
  const std::size_t dh = params.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t h = 0; h < params.heads; ++h) {
    Tensor qh = params.heads == 1 ? q : slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = params.heads == 1 ? k : slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = params.heads == 1 ? v : slice_cols(v, h * dh, (h + 1) * dh);
    Tensor s = scale(matmul_nt(qh, kh), inv_sqrt);
    for (double value : s.values())
      if (!std::isfinite(value))
        throw NumericError("non-finite attention score in layer " + std::to_string(layer_index));
    scores_.push_back(std::move(s));
    values_.push_back(std::move(vh));
  }
}

Tensor SharedAttention::attend(const AttentionMask& mask) const {
  if (mask.size() != length_)
    throw DimensionError("attention mask covers " + std::to_string(mask.size()) +
                         " tokens, sequence has " + std::to_string(length_));
  std::vector<Tensor> heads;
  heads.reserve(values_.size());
  for (std::size_t h = 0; h < values_.size(); ++h)
    heads.push_back(matmul(masked_softmax_lastdim(scores_[h], mask.allowed), values_[h]));
  return heads.size() == 1 ? heads[0] : concat_cols(heads);
}

Tensor SharedAttention::project_output(const Tensor& heads_concat) const {
  return linear(heads_concat, params_->wo, params_->bo);
}

Tensor generalized_mha(const Tensor& x_input, const AttentionMask& mask,
                       const LayerParams& params, int layer_index) {
  SharedAttention shared(x_input, params, layer_index);
  return shared.project_output(shared.attend(mask));
}

Tensor residual_norm(const Tensor& sublayer_out, const Tensor& residual_in, const Tensor& gain,
                     const Tensor& bias, double eps) {
  return layer_norm(add(sublayer_out, residual_in), gain, bias, eps);
}

Tensor ffn_block(const Tensor& x, const LayerParams& params) {
  const Tensor hidden = gelu(linear(x, params.w1, params.b1));
  return residual_norm(linear(hidden, params.w2, params.b2), x, params.ln2_gain, params.ln2_bias,
                       params.ln_eps);
}

}  // namespace switchbert
