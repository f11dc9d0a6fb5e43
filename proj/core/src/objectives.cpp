#include "switchbert/objectives.hpp"

#include <cmath>
#include <string>

#include "switchbert/ops.hpp"

namespace switchbert {

TextMasking mask_text_tokens(const MultimodalSample& sample, double rate, std::size_t vocab,
                             Rng& rng, bool force_one) {
  if (rate < 0.0 || rate > 1.0) throw ContractError("mask_text_tokens: rate outside [0, 1]");
  if (vocab <= tokens::kFirstWordId) throw ContractError("mask_text_tokens: vocab too small");
  TextMasking out;
  out.corrupted = sample;
  const std::size_t n = sample.tokens.size();
  std::vector<std::size_t> maskable;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t id = sample.tokens[i];
    if (id == tokens::kCls || id == tokens::kSep || id == tokens::kPad) continue;
    if (sample.txt_pad.empty() || !sample.txt_pad[i]) maskable.push_back(i);
  }
  for (auto i : maskable)
    if (rng.bernoulli(rate)) out.positions.push_back(i);
  if (out.positions.empty() && force_one && !maskable.empty())
    out.positions.push_back(maskable[rng.below(maskable.size())]);
  for (auto i : out.positions) {
    out.targets.push_back(sample.tokens[i]);
    const double r = rng.uniform();
    if (r < 0.8) {
      out.corrupted.tokens[i] = tokens::kMask;
    } else if (r < 0.9) {
      out.corrupted.tokens[i] = tokens::kFirstWordId + rng.below(vocab - tokens::kFirstWordId);
    }
  }
  return out;
}

RegionMasking mask_regions(const MultimodalSample& sample, double rate, std::size_t num_classes,
                           Rng& rng, bool force_one) {
  if (rate < 0.0 || rate > 1.0) throw ContractError("mask_regions: rate outside [0, 1]");
  const std::size_t R = sample.regions;
  if (sample.class_dists.size() != R * num_classes)
    throw DimensionError("mask_regions: sample carries " +
                         std::to_string(sample.class_dists.size()) +
                         " distribution values for " + std::to_string(R) + " regions");
  RegionMasking out;
  out.corrupted = sample;
  const std::size_t fd = R ? sample.features.size() / R : 0;
  std::vector<std::size_t> maskable;
  for (std::size_t r = 0; r < R; ++r)
    if (sample.img_pad.empty() || !sample.img_pad[r + 1]) maskable.push_back(r);
  std::vector<std::size_t> picked;
  for (auto r : maskable)
    if (rng.bernoulli(rate)) picked.push_back(r);
  if (picked.empty() && force_one && !maskable.empty())
    picked.push_back(maskable[rng.below(maskable.size())]);
  for (auto r : picked) {
    std::fill(out.corrupted.features.begin() + static_cast<std::ptrdiff_t>(r * fd),
              out.corrupted.features.begin() + static_cast<std::ptrdiff_t>((r + 1) * fd), 0.0f);
    out.positions.push_back(r + 1);
    for (std::size_t c = 0; c < num_classes; ++c)
      out.targets.push_back(sample.class_dists[r * num_classes + c]);
  }
  return out;
}

Tensor gather_states(const Tensor& x, std::span<const std::size_t> rows) {
  if (rows.empty()) throw ContractError("gather_states: no rows requested");
  std::vector<Tensor> parts;
  parts.reserve(rows.size());
  for (auto r : rows) {
    if (r >= x.dim(0)) throw ContractError("gather_states: row " + std::to_string(r) + " out of range");
    parts.push_back(slice_rows(x, r, r + 1));
  }
  return parts.size() == 1 ? parts[0] : concat_rows(parts);
}

Tensor mlm_loss(const Tensor& masked_states, std::span<const std::size_t> targets,
                const HeadParams& head) {
  if (targets.empty()) throw ContractError("mlm_loss: no masked positions");
  if (masked_states.rank() != 2 || masked_states.dim(0) != targets.size())
    throw DimensionError("mlm_loss: " + shape_str(masked_states.shape()) + " states for " +
                         std::to_string(targets.size()) + " targets");
  return cross_entropy(linear(masked_states, head.mlm_w, head.mlm_b), targets);
}

Tensor mrc_kl_loss(const Tensor& masked_states, std::span<const double> targets,
                   const HeadParams& head) {
  if (targets.empty()) throw ContractError("mrc_kl_loss: no masked regions");
  if (masked_states.rank() != 2) throw DimensionError("mrc_kl_loss: states must be rank 2");
  const std::size_t rows = masked_states.dim(0);
  const std::size_t C = head.mrc_w.dim(1);
  if (targets.size() != rows * C)
    throw DimensionError("mrc_kl_loss: " + std::to_string(targets.size()) +
                         " target values for " + std::to_string(rows) + " x " +
                         std::to_string(C));
  double entropy_term = 0.0;  // Σ t log t
  for (std::size_t r = 0; r < rows; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double t = targets[r * C + c];
      if (!(t >= 0.0)) throw ContractError("mrc_kl_loss: negative target probability");
      total += t;
      if (t > 0.0) entropy_term += t * std::log(t);
    }
    if (std::abs(total - 1.0) > 1e-4)
      throw ContractError("mrc_kl_loss: target row " + std::to_string(r) + " sums to " +
                          std::to_string(total));
  }
  const Tensor logq = log_softmax_lastdim(linear(masked_states, head.mrc_w, head.mrc_b));
  const Tensor cross = sum(mul_const(logq, targets));
  Tensor loss =
      scale(add_scalar(scale(cross, -1.0), entropy_term), 1.0 / static_cast<double>(rows));
  // Rounding can leave an exact match a few ulps below zero.
  if (loss.item() < 0.0) loss = scale(loss, 0.0);
  return loss;
}

Tensor itm_fourway_loss(const Tensor& scores, std::span<const std::uint8_t> labels) {
  if (labels.size() != scores.numel())
    throw DimensionError("itm_fourway_loss: label count differs from score count");
  std::size_t positives = 0, index = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i]) {
      ++positives;
      index = i;
    }
  if (positives != 1)
    throw ContractError("itm_fourway_loss: group needs exactly one positive, has " +
                        std::to_string(positives));
  const std::size_t target[] = {index};
  return cross_entropy(reshape(scores, {1, scores.numel()}), target);
}

Tensor itm_pair_loss(const Tensor& score, bool positive) {
  return bce_with_logits(score, positive ? 1.0 : 0.0);
}

}  // namespace switchbert
