#include "switchbert/optim.hpp"

#include <cmath>

namespace switchbert {

Adam::Adam(ParamStore& params, AdamConfig config) : params_(&params), config_(config) {
  for (const auto& e : params) {
    m_.emplace_back(e.tensor.numel(), 0.0);
    v_.emplace_back(e.tensor.numel(), 0.0);
  }
}

double global_grad_norm(const ParamStore& params) {
  double total = 0.0;
  for (const auto& e : params) {
    if (!e.tensor.has_grad()) continue;
    for (double g : e.tensor.grad_values()) total += g * g;
  }
  return std::sqrt(total);
}

double Adam::step() {
  if (m_.size() != params_->size()) throw ContractError("Adam: parameter store changed size");
  const double norm = global_grad_norm(*params_);
  if (!std::isfinite(norm)) throw NumericError("Adam: non-finite gradient norm");
  const double clip = config_.clip_norm > 0.0 && norm > config_.clip_norm
                          ? config_.clip_norm / norm
                          : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  std::size_t k = 0;
  for (auto& e : *params_) {
    auto& m = m_[k];
    auto& v = v_[k];
    ++k;
    if (!e.tensor.has_grad()) continue;
    const auto grad = e.tensor.grad_values();
    dispatch(e.tensor.dtype(), [&]<class T>() {
      auto w = e.tensor.mutable_data<T>();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double g = grad[i] * clip;
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
        const double update = config_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
        w[i] = static_cast<T>(static_cast<double>(w[i]) - update);
      }
    });
  }
  return norm;
}

}  // namespace switchbert
