#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "switchbert/param_store.hpp"
#include "switchbert/rng.hpp"
#include "switchbert/tensor.hpp"

namespace switchbert {

/// The four multimodal interaction modes. X is the visual sequence and ¬X the
/// text sequence; the ordinal is the route index used by the switcher.
enum class InteractionMode : std::uint8_t {
  SelfSelf = 0,   // M0: both modalities self-attend
  SelfCross = 1,  // M1: image self-attends, text cross-attends to image
  CrossSelf = 2,  // M2: image cross-attends to text, text self-attends
  Joint = 3,      // M3: every token attends the whole multimodal context
};

inline constexpr std::size_t kNumModes = 4;
inline constexpr std::array<InteractionMode, kNumModes> kAllModes = {
    InteractionMode::SelfSelf, InteractionMode::SelfCross, InteractionMode::CrossSelf,
    InteractionMode::Joint};

const char* to_string(InteractionMode mode) noexcept;
/// Accepts "M0".."M3" or the long names ("self-self", "joint", ...).
InteractionMode parse_mode(const std::string& text);
InteractionMode mode_from_index(std::size_t index);

/// Allowed (row attends column) pattern over the concatenated [image; text]
/// sequence of n_img + n_txt tokens.
struct AttentionMask {
  std::size_t n_img = 0;
  std::size_t n_txt = 0;
  std::vector<std::uint8_t> allowed;

  std::size_t size() const noexcept { return n_img + n_txt; }
  bool at(std::size_t row, std::size_t col) const { return allowed[row * size() + col] != 0; }
};

/// pad[i] != 0 marks token i of the concatenated sequence as padding; padding
/// columns are disallowed for every row.
AttentionMask build_mode_mask(InteractionMode mode, std::size_t n_img, std::size_t n_txt,
                              std::span<const std::uint8_t> pad);

/// One transformer layer's weights, shared by all four interaction modes.
/// Heads are contiguous column blocks of wq/wk/wv.
struct LayerParams {
  Tensor wq, wk, wv;  // [d×d]
  Tensor wo, bo;      // [d×d], [d]
  Tensor w1, b1;      // [d×d_f], [d_f]
  Tensor w2, b2;      // [d_f×d], [d]
  Tensor ln1_gain, ln1_bias;
  Tensor ln2_gain, ln2_bias;
  std::size_t heads = 1;
  double ln_eps = 1e-5;

  std::size_t dim() const { return wq.dim(0); }
  std::size_t ffn_dim() const { return w1.dim(1); }
  std::size_t head_dim() const { return dim() / heads; }
};

/// Registers a layer under `prefix` (e.g. "layer.0") with N(0, std) weights,
/// zero biases and unit layer-norm gains.
LayerParams make_layer_params(ParamStore& store, const std::string& prefix, std::size_t dim,
                              std::size_t heads, std::size_t ffn_dim, DType dtype, Rng& rng,
                              double init_std, double ln_eps);

/// Query/key/value projections and per-head scores of one input, computed once
/// and reused by every mode mask (the modes share their weights).
class SharedAttention {
 public:
  /// layer_index is reported in numeric errors; -1 means "unknown".
  SharedAttention(const Tensor& x_input, const LayerParams& params, int layer_index = -1);

  /// Masked attention for one mode: concatenated head outputs before the
  /// output projection, [n×d].
  Tensor attend(const AttentionMask& mask) const;
  /// ·W_O + b_O.
  Tensor project_output(const Tensor& heads_concat) const;

  std::size_t length() const noexcept { return length_; }

 private:
  const LayerParams* params_;
  std::size_t length_;
  std::vector<Tensor> scores_;  // per head, scaled by 1/√d_head
  std::vector<Tensor> values_;  // per head, [n×d_head]
};

/// MHA(q(X_input), k(X_context), v(X_context)) with the context restricted by
/// the mask. Equals plain multi-head attention when the mask is all-ones.
Tensor generalized_mha(const Tensor& x_input, const AttentionMask& mask,
                       const LayerParams& params, int layer_index = -1);

/// LN(sublayer_out + residual_in).
Tensor residual_norm(const Tensor& sublayer_out, const Tensor& residual_in, const Tensor& gain,
                     const Tensor& bias, double eps);

/// LN(x + GeLU(x·W1 + b1)·W2 + b2).
Tensor ffn_block(const Tensor& x, const LayerParams& params);

}  // namespace switchbert
