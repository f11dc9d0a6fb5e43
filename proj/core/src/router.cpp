#include "switchbert/router.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "switchbert/ops.hpp"

namespace switchbert {

const char* to_string(BlockKind kind) noexcept { return kind == BlockKind::SAB ? "SAB" : "SIB"; }

const char* to_string(RouteMode mode) noexcept {
  return mode == RouteMode::Train ? "train" : "infer";
}

RouterParams make_router_params(ParamStore& store, const std::string& prefix, std::size_t dim,
                                std::size_t routes, DType dtype, Rng& rng, double init_std) {
  auto normal = [&](Shape shape) {
    Tensor t = Tensor::zeros(std::move(shape), dtype);
    for (std::size_t i = 0; i < t.numel(); ++i) t.set(i, init_std * rng.normal());
    return t;
  };
  RouterParams r;
  r.w1 = store.add(prefix + ".w1", normal({dim, dim}));
  r.b1 = store.add(prefix + ".b1", Tensor::zeros({dim}, dtype));
  r.w2 = store.add(prefix + ".w2", normal({dim, routes}));
  r.b2 = store.add(prefix + ".b2", Tensor::zeros({routes}, dtype));
  return r;
}

Tensor pool_modality(const Tensor& x_mod, std::span<const std::uint8_t> pad) {
  if (x_mod.rank() != 2) throw DimensionError("pool_modality: expected [N x d], got " + shape_str(x_mod.shape()));
  std::vector<std::uint8_t> keep(x_mod.dim(0), 1);
  if (!pad.empty()) {
    if (pad.size() != keep.size())
      throw DimensionError("pool_modality: " + std::to_string(pad.size()) + " pad flags for " +
                           std::to_string(keep.size()) + " rows");
    for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = pad[i] ? 0 : 1;
  }
  return mean_rows(x_mod, keep);
}

Tensor alignment_degree(const Tensor& z_i, const Tensor& z_t) { return mul(z_i, z_t); }

Tensor mode_distribution(const Tensor& d_l, const RouterParams& params,
                         std::span<const std::uint8_t> allowed) {
  const std::size_t d = d_l.numel();
  if (d != params.dim())
    throw DimensionError("mode_distribution: input width " + std::to_string(d) +
                         " vs router width " + std::to_string(params.dim()));
  const Tensor hidden = gelu(linear(reshape(d_l, {1, d}), params.w1, params.b1));
  const Tensor logits = reshape(linear(hidden, params.w2, params.b2), {params.routes()});
  if (allowed.empty()) return softmax_lastdim(logits);
  if (allowed.size() != params.routes())
    throw DimensionError("mode_distribution: allowed set has wrong width");
  if (std::none_of(allowed.begin(), allowed.end(), [](auto a) { return a != 0; }))
    throw ContractError("mode_distribution: empty route set");
  return masked_softmax_lastdim(logits, allowed);
}

double gumbel_from_uniform(double u) {
  u = std::clamp(u, 1e-9, 1.0 - 1e-9);
  return -std::log(-std::log(u));
}

std::vector<double> sample_gumbel(Rng& rng, std::size_t n) {
  std::vector<double> g(n);
  for (auto& v : g) v = gumbel_from_uniform(rng.uniform());
  return g;
}

Tensor gumbel_softmax(const Tensor& pi, double tau, std::span<const double> noise) {
  if (!(tau > 0.0)) throw ContractError("gumbel_softmax: tau must be > 0, got " + std::to_string(tau));
  Tensor logits = log_clamped(pi, 1e-12);
  if (!noise.empty()) {
    if (noise.size() != pi.numel()) throw DimensionError("gumbel_softmax: noise width mismatch");
    logits = add(logits, Tensor::from_values(pi.shape(), noise, pi.dtype()));
  }
  return softmax_lastdim(scale(logits, 1.0 / tau));
}

Tensor restrict_routes(const Tensor& p, std::span<const std::uint8_t> keep) {
  if (keep.size() != p.numel()) throw DimensionError("restrict_routes: flag width mismatch");
  if (std::all_of(keep.begin(), keep.end(), [](auto k) { return k != 0; })) return p;
  std::vector<double> m(keep.size());
  for (std::size_t i = 0; i < keep.size(); ++i) m[i] = keep[i] ? 1.0 : 0.0;
  const Tensor kept = mul_const(p, m);
  return div_scalar(kept, sum(kept));
}

std::vector<std::uint8_t> topk_flags(std::span<const double> p, std::size_t k) {
  if (k < 1 || k > p.size())
    throw ContractError("top-k: k=" + std::to_string(k) + " outside [1, " +
                        std::to_string(p.size()) + "]");
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  std::vector<std::uint8_t> flags(p.size(), 0);
  for (std::size_t i = 0; i < k; ++i) flags[order[i]] = 1;
  return flags;
}

Tensor apply_topk(const Tensor& p, std::size_t k) {
  const auto values = p.values();
  return restrict_routes(p, topk_flags(values, k));
}

std::size_t argmax_lowest(std::span<const double> values) {
  if (values.empty()) throw ContractError("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

Tensor combine_soft(const Tensor& p, std::size_t count, const CandidateFn& candidate) {
  if (p.numel() != count)
    throw ContractError("combine_soft: " + std::to_string(p.numel()) + " weights for " +
                        std::to_string(count) + " candidates");
  const auto w = p.values();
  Tensor total;
  Shape shape;
  for (std::size_t n = 0; n < count; ++n) {
    if (w[n] == 0.0) continue;
    const Tensor c = candidate(n);
    if (!total.defined()) {
      shape = c.shape();
    } else if (c.shape() != shape) {
      throw ContractError("combine_soft: candidate shapes differ, " + shape_str(shape) + " vs " +
                          shape_str(c.shape()));
    }
    const Tensor term = mul_scalar(c, pick(p, n));
    total = total.defined() ? add(total, term) : term;
  }
  if (!total.defined()) throw ContractError("combine_soft: all weights are zero");
  return total;
}

Tensor combine_soft(const Tensor& p, std::span<const Tensor> candidates) {
  for (const auto& c : candidates)
    if (c.shape() != candidates.front().shape())
      throw ContractError("combine_soft: candidate shapes differ, " +
                          shape_str(candidates.front().shape()) + " vs " + shape_str(c.shape()));
  return combine_soft(p, candidates.size(), [&](std::size_t n) { return candidates[n]; });
}

std::pair<Tensor, std::size_t> select_hard(const Tensor& p, std::size_t count,
                                           const CandidateFn& candidate) {
  if (p.numel() != count)
    throw ContractError("select_hard: " + std::to_string(p.numel()) + " weights for " +
                        std::to_string(count) + " candidates");
  const std::size_t choice = argmax_lowest(p.values());
  return {candidate(choice), choice};
}

std::pair<Tensor, std::size_t> select_hard(const Tensor& p, std::span<const Tensor> candidates) {
  for (const auto& c : candidates)
    if (c.shape() != candidates.front().shape())
      throw ContractError("select_hard: candidate shapes differ, " +
                          shape_str(candidates.front().shape()) + " vs " + shape_str(c.shape()));
  return select_hard(p, candidates.size(), [&](std::size_t n) { return candidates[n]; });
}

}  // namespace switchbert
