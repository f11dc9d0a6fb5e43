#include <cmath>

#include <gtest/gtest.h>

#include "support.hpp"

namespace switchbert {
namespace {

using test::check_gradients;
using test::expect_values;
using test::random_tensor;

TEST(Tensor, ShapeAndValues) {
  Tensor t = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_EQ(t.dtype(), DType::F32);
  EXPECT_DOUBLE_EQ(t.at(4), 5.0);
  EXPECT_THROW(Tensor::zeros({2, 0}), DimensionError);
  EXPECT_THROW(Tensor::from_values({2, 2}, {1, 2, 3}), DimensionError);
}

TEST(Tensor, GraphOutputsAreImmutable) {
  Tensor a = Tensor::from_values({2}, {1, 2});
  a.set_requires_grad(true);
  Tensor b = add(a, a);
  EXPECT_THROW(b.mutable_data<float>(), ContractError);
  EXPECT_THROW(a.mutable_data<double>(), ContractError);
}

TEST(Tensor, CloneAndConvert) {
  Tensor a = Tensor::from_values({2}, {1.5, -2.0}, DType::F64);
  Tensor c = a.clone();
  c.set(0, 9.0);
  EXPECT_DOUBLE_EQ(a.at(0), 1.5);
  Tensor f = a.to(DType::F32);
  EXPECT_EQ(f.dtype(), DType::F32);
  EXPECT_FLOAT_EQ(static_cast<float>(f.at(1)), -2.0f);
}

TEST(Matmul, IdentityAndHandValue) {
  Tensor i = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from_values({2, 2}, {3, 4, 5, 6});
  expect_values(matmul(i, b), {3, 4, 5, 6}, 0.0);
  Tensor r = Tensor::from_values({1, 2}, {1, 2});
  Tensor c = Tensor::from_values({2, 1}, {3, 4});
  expect_values(matmul(r, c), {11}, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientOfSum) {
  ParamStore store;
  Tensor a = store.add("a", Tensor::from_values({1, 2}, {1, 2}, DType::F64));
  Tensor b = Tensor::from_values({2, 1}, {3, 4}, DType::F64);
  sum(matmul(a, b)).backward();
  expect_values(Tensor::from_values({2}, a.grad_values(), DType::F64), {3, 4}, 1e-12);
  const auto cmp = check_gradients(store, [&] { return sum(matmul(a, b)); });
  EXPECT_LT(cmp.max_abs_err, 1e-6);
}

TEST(Matmul, AssociativityAtF32) {
  Rng rng(3);
  Tensor a = random_tensor({4, 5}, rng, DType::F32);
  Tensor b = random_tensor({5, 6}, rng, DType::F32);
  Tensor c = random_tensor({6, 3}, rng, DType::F32);
  EXPECT_LT(test::max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))), 1e-4);
}

TEST(Softmax, Examples) {
  expect_values(softmax_lastdim(Tensor::from_values({4}, {0, 0, 0, 0})), {0.25, 0.25, 0.25, 0.25},
                1e-7);
  expect_values(softmax_lastdim(Tensor::from_values({4}, {1, 0, 0, 0})),
                {0.4754, 0.1749, 0.1749, 0.1749}, 1e-3);
  Tensor big = softmax_lastdim(Tensor::from_values({2}, {1000, 0}, DType::F64));
  expect_values(big, {1, 0}, 1e-9);
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(11);
  Tensor x = random_tensor({5, 7}, rng, DType::F32, 3.0);
  Tensor y = softmax_lastdim(x);
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 7; ++c) {
      const double v = y.at(r * 7 + c);
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Gelu, Examples) {
  expect_values(gelu(Tensor::from_values({3}, {0, 1, -10}, DType::F64)),
                {0.0, 0.5 * (1 + std::erf(1 / std::sqrt(2.0))), 0.0}, 1e-8);
  EXPECT_NEAR(gelu(Tensor::scalar(1.0)).item(), 0.8413, 1e-3);
}

TEST(LayerNorm, Examples) {
  Tensor gain = Tensor::full({3}, 1.0);
  Tensor bias = Tensor::zeros({3});
  expect_values(layer_norm(Tensor::from_values({1, 3}, {1, 2, 3}), gain, bias, 1e-5),
                {-1.2247, 0, 1.2247}, 1e-3);
  expect_values(layer_norm(Tensor::from_values({1, 3}, {5, 5, 5}), gain, bias, 1e-5), {0, 0, 0},
                1e-2);
  Tensor b = Tensor::from_values({3}, {0.5, -1, 2});
  Tensor out = layer_norm(Tensor::from_values({1, 3}, {1, 7, 3}), Tensor::zeros({3}), b, 1e-5);
  expect_values(out, {0.5, -1, 2}, 0.0);
}

TEST(LayerNorm, NormalisedStatistics) {
  Rng rng(5);
  Tensor x = random_tensor({4, 16}, rng, DType::F64, 5.0);
  Tensor y = layer_norm(x, Tensor::full({16}, 1.0, DType::F64), Tensor::zeros({16}, DType::F64), 1e-5);
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t c = 0; c < 16; ++c) m += y.at(r * 16 + c);
    m /= 16;
    for (std::size_t c = 0; c < 16; ++c) v += (y.at(r * 16 + c) - m) * (y.at(r * 16 + c) - m);
    EXPECT_NEAR(m, 0.0, 1e-6);
    EXPECT_NEAR(v / 16, 1.0, 1e-4);
  }
}

TEST(Backward, Examples) {
  ParamStore store;
  Tensor x = store.add("x", Tensor::from_values({3}, {1, 2, 3}, DType::F64));
  sum(x).backward();
  EXPECT_EQ(x.grad_values(), (std::vector<double>{1, 1, 1}));

  Tensor y = store.add("y", Tensor::from_values({2}, {1, 2}, DType::F64));
  sum(mul(y, y)).backward();
  EXPECT_EQ(y.grad_values(), (std::vector<double>{2, 4}));

  Tensor z = store.add("z", Tensor::from_values({1}, {1}, DType::F64));
  add(sum(z), sum(z)).backward();
  EXPECT_EQ(z.grad_values(), (std::vector<double>{2}));
}

TEST(Backward, NonScalarIsContractError) {
  Tensor x = Tensor::from_values({2}, {1, 2});
  x.set_requires_grad(true);
  EXPECT_THROW(scale(x, 2.0).backward(), ContractError);
}

TEST(Backward, NoGradGuardStopsRecording) {
  Tensor x = Tensor::from_values({2}, {1, 2});
  x.set_requires_grad(true);
  Tensor y;
  {
    NoGradGuard g;
    y = sum(mul(x, x));
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(grad_recording_enabled());
}

TEST(Backward, DtypeMismatchRejected) {
  EXPECT_THROW(add(Tensor::zeros({2}, DType::F32), Tensor::zeros({2}, DType::F64)), Error);
}

TEST(FiniteDiff, Examples) {
  ParamStore store;
  Tensor t = store.add("theta", Tensor::from_values({1}, {3}, DType::F64));
  const auto sq = finite_diff_grad([&](const ParamStore&) { return t.at(0) * t.at(0); }, store, 1e-5);
  EXPECT_NEAR(sq[0].values[0], 6.0, 1e-6);
  const auto flat = finite_diff_grad([](const ParamStore&) { return 4.2; }, store, 1e-5);
  EXPECT_NEAR(flat[0].values[0], 0.0, 1e-9);
}

TEST(FiniteDiff, NonDeterministicObjectiveDetected) {
  ParamStore store;
  store.add("theta", Tensor::from_values({1}, {3}, DType::F64));
  int calls = 0;
  EXPECT_THROW(finite_diff_grad([&](const ParamStore&) { return double(++calls); }, store, 1e-5),
               OracleError);
  EXPECT_THROW(finite_diff_grad([](const ParamStore&) { return 0.0; }, store, 0.0), ContractError);
}

// Every differentiable op against central differences on small random shapes.
TEST(Autodiff, OpsMatchFiniteDifferences) {
  Rng rng(21);
  ParamStore s;
  Tensor a = s.add("a", random_tensor({3, 4}, rng));
  Tensor b = s.add("b", random_tensor({4, 2}, rng));
  Tensor c = s.add("c", random_tensor({3, 4}, rng));
  Tensor v = s.add("v", random_tensor({4}, rng));
  Tensor g = s.add("g", random_tensor({4}, rng));
  Tensor k = s.add("k", random_tensor({1}, rng));
  Tensor w = s.add("w", random_tensor({2}, rng));
  const std::uint8_t allowed[12] = {1, 0, 1, 1, 0, 1, 1, 1, 1, 1, 0, 0};
  const std::uint8_t keep[3] = {1, 0, 1};
  const std::size_t ids[3] = {2, 0, 2};
  const std::size_t targets[3] = {1, 3, 0};
  const std::vector<std::function<Tensor()>> cases = {
      [&] { return sum(mul(matmul(a, b), matmul(c, b))); },
      [&] { return sum(mul(matmul_nt(a, c), matmul_nt(c, a))); },
      [&] { return sum(mul(transpose(a), transpose(c))); },
      [&] { return sum(mul(linear(a, b, w), linear(c, b, w))); },
      [&] { return sum(mul(sub(a, c), add(a, c))); },
      [&] { return sum(mul(add_scalar(scale(a, 1.7), 0.3), c)); },
      [&] { return sum(mul(add_rowvec(a, v), mul_rowvec(c, g))); },
      [&] { return sum(mul(div_scalar(a, add_scalar(mul(k, k), 1.0)), mul_scalar(c, k))); },
      [&] { return sum(mul(mask_rows(a, keep), c)); },
      [&] { return sum(mul(gelu(a), exp(scale(c, 0.3)))); },
      [&] { return sum(log_clamped(add_scalar(mul(a, a), 0.5), 1e-12)); },
      [&] { return mul(mean(mul(a, c)), sum(v)); },
      [&] { return sum(mul(mean_rows(a, keep), v)); },
      [&] { return sum(mul(softmax_lastdim(a), c)); },
      [&] { return sum(mul(masked_softmax_lastdim(a, allowed), c)); },
      [&] { return sum(mul(log_softmax_lastdim(a), c)); },
      [&] { return sum(mul(layer_norm(a, g, v, 1e-5), c)); },
      [&] {
        Tensor parts[2] = {slice_rows(a, 0, 2), slice_rows(c, 1, 3)};
        return sum(mul(concat_rows(parts), slice_rows(concat_rows(parts), 0, 4)));
      },
      [&] {
        Tensor parts[2] = {slice_cols(a, 1, 3), slice_cols(c, 0, 1)};
        return sum(mul(concat_cols(parts), slice_cols(c, 1, 4)));
      },
      [&] { return sum(mul(gather_rows(a, ids), c)); },
      [&] { return sum(mul(reshape(a, {4, 3}), reshape(c, {4, 3}))); },
      [&] { return cross_entropy(a, targets); },
      [&] { return add(bce_with_logits(pick(a, 5), 1.0), bce_with_logits(pick(c, 2), 0.0)); },
  };
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto cmp = check_gradients(s, cases[i]);
    EXPECT_LT(cmp.max_rel_err, 1e-4) << "case " << i << " worst " << cmp.worst_param;
  }
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
  Rng r1(9), r2(9);
  Tensor x1 = random_tensor({6, 8}, r1, DType::F32);
  Tensor x2 = random_tensor({6, 8}, r2, DType::F32);
  EXPECT_EQ(softmax_lastdim(matmul_nt(x1, x1)).values(), softmax_lastdim(matmul_nt(x2, x2)).values());
}

TEST(Flops, CounterTracksForwardMatmuls) {
  reset_forward_matmul_flops();
  matmul(Tensor::zeros({4, 8}), Tensor::zeros({8, 4}));
  EXPECT_EQ(forward_matmul_flops(), 256u);
}

TEST(ParamStore, InsertionOrderAndUniqueness) {
  ParamStore s;
  s.add("z", Tensor::zeros({1}));
  s.add("a", Tensor::zeros({2}));
  EXPECT_THROW(s.add("z", Tensor::zeros({1})), ContractError);
  std::vector<std::string> names;
  for (const auto& e : s) names.push_back(e.name);
  EXPECT_EQ(names, (std::vector<std::string>{"z", "a"}));
  EXPECT_EQ(s.total_elements(), 3u);
  EXPECT_TRUE(s.get("a").requires_grad());
}

TEST(Rng, SerializeRoundTrip) {
  Rng a(77);
  a.normal();
  Rng b;
  b.deserialize(a.serialize());
  for (int i = 0; i < 5; ++i) EXPECT_EQ(a.normal(), b.normal());
  EXPECT_NE(derive_seed(1, 2), derive_seed(1, 3));
}

}  // namespace
}  // namespace switchbert
