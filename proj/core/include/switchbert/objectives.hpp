#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "switchbert/encoder.hpp"
#include "switchbert/rng.hpp"
#include "switchbert/tensor.hpp"

namespace switchbert {

/// Corrupted copy of a sample plus what was hidden. Positions are token
/// indices (text) or visual-sequence indices (regions, IMG = 0 never used).
struct TextMasking {
  MultimodalSample corrupted;
  std::vector<std::size_t> positions;
  std::vector<std::size_t> targets;
};

struct RegionMasking {
  MultimodalSample corrupted;
  std::vector<std::size_t> positions;
  std::vector<double> targets;  // positions.size() × C
};

/// BERT-style text corruption: each token other than CLS, SEP and padding is
/// selected with probability `rate`; selected tokens become MASK
/// (80%), a random word id (10%) or stay unchanged (10%). With force_one, a
/// sample with no draw gets one uniformly chosen position.
TextMasking mask_text_tokens(const MultimodalSample& sample, double rate, std::size_t vocab,
                             Rng& rng, bool force_one = true);

/// Zeroes the features of regions selected with probability `rate` and
/// records their detector distributions.
RegionMasking mask_regions(const MultimodalSample& sample, double rate, std::size_t num_classes,
                           Rng& rng, bool force_one = false);

/// Rows of x at the given indices, in order.
Tensor gather_states(const Tensor& x, std::span<const std::size_t> rows);

/// Mean cross-entropy of head(states) against the masked token ids.
Tensor mlm_loss(const Tensor& masked_states, std::span<const std::size_t> targets,
                const HeadParams& head);

/// Mean over rows of KL(target ‖ softmax(head(state))). targets is rows × C.
Tensor mrc_kl_loss(const Tensor& masked_states, std::span<const double> targets,
                   const HeadParams& head);

/// Softmax cross-entropy over a group of scores with exactly one label set.
Tensor itm_fourway_loss(const Tensor& scores, std::span<const std::uint8_t> labels);

/// Binary cross-entropy on one score.
Tensor itm_pair_loss(const Tensor& score, bool positive);

}  // namespace switchbert
