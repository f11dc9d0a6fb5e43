#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "switchbert/tensor.hpp"

namespace switchbert {

// Every op below records its backward rule when grad recording is enabled and
// an input requires grad. All reductions run sequentially in index order, so
// identical inputs give bit-identical outputs.

// Linear algebra -----------------------------------------------------------

/// [m×k]·[k×n] -> [m×n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// [m×k]·[n×k]ᵀ -> [m×n].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
/// x·w + b with b broadcast over rows.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Elementwise --------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
/// x [..×d] + v [d].
Tensor add_rowvec(const Tensor& x, const Tensor& v);
/// x [..×d] ⊙ v [d].
Tensor mul_rowvec(const Tensor& x, const Tensor& v);
/// x · s where s holds a single element.
Tensor mul_scalar(const Tensor& x, const Tensor& s);
/// x / s where s holds a single element.
Tensor div_scalar(const Tensor& x, const Tensor& s);
/// x ⊙ m for a constant (non-differentiable) mask of the same size.
Tensor mul_const(const Tensor& x, std::span<const double> m);
/// Zero the rows of a 2-D tensor where keep[row] == 0.
Tensor mask_rows(const Tensor& x, std::span<const std::uint8_t> keep);
/// Exact GeLU: x·Φ(x).
Tensor gelu(const Tensor& x);
Tensor exp(const Tensor& x);
/// log(max(x, floor)); gradient is zero where the floor is active.
Tensor log_clamped(const Tensor& x, double floor);

// Reductions ---------------------------------------------------------------

/// Sum of all elements -> [1].
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean over the rows of a 2-D tensor whose keep flag is set -> [d].
Tensor mean_rows(const Tensor& x, std::span<const std::uint8_t> keep);

// Normalisation ------------------------------------------------------------

Tensor softmax_lastdim(const Tensor& x);
/// Softmax with −1e9 added to entries whose allowed flag is 0
/// (allowed has x.numel() entries).
Tensor masked_softmax_lastdim(const Tensor& x, std::span<const std::uint8_t> allowed);
Tensor log_softmax_lastdim(const Tensor& x);
/// Per-row normalisation over the last dim with population variance.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

// Indexing -----------------------------------------------------------------

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_cols(std::span<const Tensor> parts);
/// Rows of a [V×d] table -> [ids.size()×d].
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);
/// Single element as a [1] tensor.
Tensor pick(const Tensor& x, std::size_t flat_index);
Tensor reshape(const Tensor& x, Shape shape);

// Losses -------------------------------------------------------------------

/// Mean over rows of −log softmax(logits)[row, target[row]].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);
/// Binary cross-entropy on a raw score with label in {0, 1}.
Tensor bce_with_logits(const Tensor& score, double label);

// Instrumentation ----------------------------------------------------------

/// Running 2·m·n·k total of forward matmuls on this thread.
std::uint64_t forward_matmul_flops() noexcept;
void reset_forward_matmul_flops() noexcept;

}  // namespace switchbert
