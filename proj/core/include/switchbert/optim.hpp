#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "switchbert/param_store.hpp"

namespace switchbert {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global gradient norm bound; <= 0 disables clipping
};

/// Adam with bias correction and global-norm clipping. Moments are kept in
/// double precision, one vector per parameter in store order.
class Adam {
 public:
  Adam(ParamStore& params, AdamConfig config);

  /// Applies one update from the gradients currently held by the store and
  /// returns the gradient norm before clipping.
  double step();

  std::uint64_t steps() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return config_; }

  std::vector<std::vector<double>>& first_moments() noexcept { return m_; }
  std::vector<std::vector<double>>& second_moments() noexcept { return v_; }
  const std::vector<std::vector<double>>& first_moments() const noexcept { return m_; }
  const std::vector<std::vector<double>>& second_moments() const noexcept { return v_; }
  void set_steps(std::uint64_t t) noexcept { t_ = t; }

 private:
  ParamStore* params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::uint64_t t_ = 0;
};

/// √(Σ g²) over every gradient in the store.
double global_grad_norm(const ParamStore& params);

}  // namespace switchbert
