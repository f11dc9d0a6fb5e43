#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "switchbert/gradcheck.hpp"
#include "switchbert/ops.hpp"
#include "switchbert/param_store.hpp"
#include "switchbert/rng.hpp"
#include "switchbert/tensor.hpp"

namespace switchbert::test {

inline Tensor random_tensor(Shape shape, Rng& rng, DType dtype = DType::F64, double scale = 1.0) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::from_values(std::move(shape), v, dtype);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  const auto va = a.values();
  const auto vb = b.values();
  EXPECT_EQ(va.size(), vb.size());
  double m = 0.0;
  for (std::size_t i = 0; i < va.size() && i < vb.size(); ++i) m = std::max(m, std::abs(va[i] - vb[i]));
  return m;
}

inline void expect_values(const Tensor& t, const std::vector<double>& want, double tol) {
  const auto got = t.values();
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], tol) << "index " << i;
}

// Backward gradients of f against central differences, all inputs f64.
inline GradComparison check_gradients(ParamStore& store, const std::function<Tensor()>& f,
                                      double floor = 1e-6) {
  store.zero_grad();
  f().backward();
  const auto est = finite_diff_grad(
      [&](const ParamStore&) {
        NoGradGuard g;
        return f().item();
      },
      store, 1e-5);
  return compare_gradients(store, est, floor);
}

}  // namespace switchbert::test
