#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "switchbert/param_store.hpp"
#include "switchbert/rng.hpp"
#include "switchbert/tensor.hpp"

namespace switchbert {

enum class BlockKind : std::uint8_t { SAB = 0, SIB = 1 };
enum class RouteMode : std::uint8_t { Train = 0, Infer = 1 };

const char* to_string(BlockKind kind) noexcept;
const char* to_string(RouteMode mode) noexcept;

/// Switcher MLP d -> d -> routes with GeLU in between.
struct RouterParams {
  Tensor w1, b1, w2, b2;

  std::size_t dim() const { return w1.dim(0); }
  std::size_t routes() const { return w2.dim(1); }
};

RouterParams make_router_params(ParamStore& store, const std::string& prefix, std::size_t dim,
                                std::size_t routes, DType dtype, Rng& rng, double init_std);

/// One switcher decision of one sample.
struct RouteDecision {
  int layer = 0;
  BlockKind block = BlockKind::SAB;
  std::vector<double> pi;
  std::vector<double> p;
  std::size_t choice = 0;
  double tau = 1.0;
  RouteMode mode = RouteMode::Infer;
  bool forced = false;
};

/// Mean over the non-padding rows of x [N×d] (pad may be empty) -> [d].
Tensor pool_modality(const Tensor& x_mod, std::span<const std::uint8_t> pad);

/// z_i ⊙ z_t.
Tensor alignment_degree(const Tensor& z_i, const Tensor& z_t);

/// softmax(MLP(d_l)) -> [routes]. A non-empty `allowed` restricts the softmax
/// to the flagged routes.
Tensor mode_distribution(const Tensor& d_l, const RouterParams& params,
                         std::span<const std::uint8_t> allowed = {});

/// −log(−log u) with u clamped to [1e-9, 1 − 1e-9].
double gumbel_from_uniform(double u);
std::vector<double> sample_gumbel(Rng& rng, std::size_t n);

/// p_n ∝ exp((log π_n + g_n) / τ), π clamped at 1e-12 before the log.
/// Empty noise means g = 0.
Tensor gumbel_softmax(const Tensor& pi, double tau, std::span<const double> noise = {});

/// Zeroes the routes whose keep flag is 0 and renormalises.
Tensor restrict_routes(const Tensor& p, std::span<const std::uint8_t> keep);

/// Indices of the k largest entries; ties prefer the lower index.
std::vector<std::uint8_t> topk_flags(std::span<const double> p, std::size_t k);

/// Keeps the k largest entries and renormalises.
Tensor apply_topk(const Tensor& p, std::size_t k);

/// Lowest index among the maxima.
std::size_t argmax_lowest(std::span<const double> values);

using CandidateFn = std::function<Tensor(std::size_t)>;

/// Σ p_n · candidate_n over the candidates with nonzero weight; the
/// candidate function is only called for those.
Tensor combine_soft(const Tensor& p, std::size_t count, const CandidateFn& candidate);
Tensor combine_soft(const Tensor& p, std::span<const Tensor> candidates);

/// Candidate at argmax(p); only that candidate is evaluated.
std::pair<Tensor, std::size_t> select_hard(const Tensor& p, std::size_t count,
                                           const CandidateFn& candidate);
std::pair<Tensor, std::size_t> select_hard(const Tensor& p, std::span<const Tensor> candidates);

}  // namespace switchbert
