#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "switchbert/attention.hpp"
#include "switchbert/config.hpp"
#include "switchbert/param_store.hpp"
#include "switchbert/router.hpp"
#include "switchbert/tensor.hpp"

namespace switchbert {

/// Reserved token ids. Ordinary words start at kFirstWordId.
namespace tokens {
inline constexpr std::size_t kPad = 0;
inline constexpr std::size_t kCls = 1;
inline constexpr std::size_t kSep = 2;
inline constexpr std::size_t kMask = 3;
inline constexpr std::size_t kUnk = 4;
inline constexpr std::size_t kFirstWordId = 5;
}  // namespace tokens

/// One image-text pair as encoder input. The visual sequence is
/// [IMG, region_1, ..., region_R]; the text is [CLS, w_1, ..., SEP].
struct MultimodalSample {
  std::size_t regions = 0;
  std::vector<float> features;       // R × d_i
  std::vector<float> boxes;          // R × 4, (x1, y1, x2, y2) in [0, 1]
  std::vector<float> class_dists;    // R × C detector distributions (may be empty)
  std::vector<std::size_t> tokens;   // text ids; position i is index i
  std::vector<std::uint8_t> img_pad; // R + 1 flags or empty
  std::vector<std::uint8_t> txt_pad; // tokens.size() flags or empty

  std::size_t n_img() const noexcept { return regions + 1; }
  std::size_t n_txt() const noexcept { return tokens.size(); }
};

using MultimodalBatch = std::vector<MultimodalSample>;

struct EmbeddingParams {
  Tensor feat_w, feat_b;      // [d_i×d], [d]
  Tensor box_w, box_b;        // [4×d], [d]
  Tensor img_embed;           // [d] whole-image slot
  Tensor visual_type;         // [d]
  Tensor token_table;         // [V×d]
  Tensor position_table;      // [N_t×d]
  Tensor text_type;           // [d]
  Tensor vis_ln_gain, vis_ln_bias;
  Tensor txt_ln_gain, txt_ln_bias;
};

/// Prediction heads; zero-initialised so an untrained model predicts uniformly.
struct HeadParams {
  Tensor mlm_w, mlm_b;  // d -> vocab
  Tensor mrc_w, mrc_b;  // d -> C
  Tensor itm_w, itm_b;  // d -> 1
};

class SwitchBertModel {
 public:
  SwitchBertModel(EncoderConfig config, std::uint64_t seed);

  const EncoderConfig& config() const noexcept { return config_; }
  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }

  const EmbeddingParams& embeddings() const noexcept { return emb_; }
  const HeadParams& heads() const noexcept { return heads_; }
  /// Layer l in 1..L.
  const LayerParams& layer(int l) const { return layers_.at(static_cast<std::size_t>(l - 1)); }
  const RouterParams& sab_router(int l) const { return sab_routers_.at(static_cast<std::size_t>(l - 1)); }
  /// SIB router of layer l in 2..L.
  const RouterParams& sib_router(int l) const { return sib_routers_.at(static_cast<std::size_t>(l - 2)); }

 private:
  EncoderConfig config_;
  ParamStore params_;
  EmbeddingParams emb_;
  HeadParams heads_;
  std::vector<LayerParams> layers_;
  std::vector<RouterParams> sab_routers_;
  std::vector<RouterParams> sib_routers_;
};

/// Token + position + TokenType embeddings, then layer norm.
Tensor embed_text(std::span<const std::size_t> token_ids, std::span<const std::size_t> positions,
                  const EmbeddingParams& params, double ln_eps);

/// IMG slot followed by projected region features + projected boxes, plus the
/// VisualType embedding, then layer norm. features [R×d_i], boxes [R×4].
Tensor embed_visual(const Tensor& features, const Tensor& boxes, const EmbeddingParams& params,
                    double ln_eps);

/// Sequence geometry and the four mode masks of one sample.
struct SequenceLayout {
  std::size_t n_img = 0;
  std::size_t n_txt = 0;
  std::vector<std::uint8_t> img_pad;  // empty when unpadded
  std::vector<std::uint8_t> txt_pad;
  std::vector<std::uint8_t> keep;     // concatenated non-padding flags
  bool padded = false;
  std::array<AttentionMask, kNumModes> masks;

  static SequenceLayout build(std::size_t n_img, std::size_t n_txt,
                              std::span<const std::uint8_t> img_pad,
                              std::span<const std::uint8_t> txt_pad);
};

/// Shared switcher pipeline: Gumbel-softmax at opts.tau, restriction to the
/// allowed routes, top-k in training; a forced route yields a constant
/// one-hot p.
struct RouteResult {
  Tensor p;
  RouteDecision decision;
};

RouteResult route_switch(const Tensor& pi, std::span<const std::uint8_t> allowed,
                         std::optional<std::size_t> forced, std::size_t topk, int layer,
                         BlockKind block, const ForwardOptions& opts);

struct SabResult {
  Tensor y_i;
  Tensor y_t;
  RouteDecision decision;
};

SabResult sab_forward(const Tensor& x_i, const Tensor& x_t, const SequenceLayout& layout,
                      const LayerParams& layer, const RouterParams& router,
                      std::span<const std::uint8_t> mode_space, int layer_index,
                      const ForwardOptions& opts, std::size_t topk);

/// Stored modality representations for depths 0..L (0 = embeddings).
struct EncoderState {
  std::vector<Tensor> img;
  std::vector<Tensor> txt;
};

struct InputPair {
  Tensor x_i;
  Tensor x_t;
};

/// [(i:l−1,t:l−1), (i:l−1,t:l−2), (i:l−2,t:l−1), (i:l−2,t:l−2)].
std::array<InputPair, 4> sib_candidates(const EncoderState& state, int l);

struct SibResult {
  Tensor x_i;
  Tensor x_t;
  RouteDecision decision;
};

SibResult sib_forward(const EncoderState& state, int l, const SequenceLayout& layout,
                      const RouterParams& router, const ForwardOptions& opts, std::size_t topk);

struct EncoderOutput {
  Tensor x_i;       // final visual states [N_i×d]
  Tensor x_t;       // final text states [N_t×d]
  Tensor img;       // final IMG state [d]
  Tensor cls;       // final CLS state [d]
  Tensor fused;     // img ⊙ cls
  std::vector<RouteDecision> decisions;  // SAB 1, SIB 2, SAB 2, ..., SAB L
};

EncoderOutput encoder_forward(const SwitchBertModel& model, const MultimodalSample& sample,
                              const ForwardOptions& opts);

/// Matching score [1] from the configured readout.
Tensor itm_score(const SwitchBertModel& model, const EncoderOutput& out);

/// Matmul FLOPs (2·m·n·k each) of one encoder_forward.
struct FlopBreakdown {
  std::uint64_t embedding = 0;
  std::uint64_t qkv = 0;
  std::uint64_t scores = 0;
  std::uint64_t values = 0;
  std::uint64_t output = 0;
  std::uint64_t ffn = 0;
  std::uint64_t router = 0;

  std::uint64_t total() const noexcept {
    return embedding + qkv + scores + values + output + ffn + router;
  }
};

/// Every SAB evaluating `active_modes` masked attention paths.
FlopBreakdown count_flops(const EncoderConfig& config, std::size_t n_img, std::size_t n_txt,
                          std::size_t active_modes);
/// Paths taken from a recorded trace: nonzero entries of p in training,
/// the single chosen mode at inference.
FlopBreakdown count_flops(const EncoderConfig& config, std::size_t n_img, std::size_t n_txt,
                          std::span<const RouteDecision> trace);

}  // namespace switchbert
