#include <chrono>
#include <cmath>

#include <gtest/gtest.h>

#include "reference.hpp"
#include "support.hpp"
#include "switchbert/encoder.hpp"
#include "switchbert/ops.hpp"

namespace switchbert {
namespace {

EncoderConfig small_config(DType dtype = DType::F64) {
  EncoderConfig c;
  c.layers = 2;
  c.dim = 32;
  c.heads = 4;
  c.ffn_dim = 64;
  c.vocab = 50;
  c.feature_dim = 6;
  c.num_classes = 4;
  c.max_visual = 6;
  c.max_text = 10;
  c.init_std = 0.2;
  c.dtype = dtype;
  return c;
}

MultimodalSample random_sample(const EncoderConfig& c, Rng& rng, std::size_t regions = 0,
                               std::size_t words = 0) {
  MultimodalSample s;
  s.regions = regions ? regions : 1 + rng.below(c.max_visual - 1);
  for (std::size_t i = 0; i < s.regions * c.feature_dim; ++i)
    s.features.push_back(static_cast<float>(rng.normal()));
  for (std::size_t r = 0; r < s.regions; ++r) {
    const float x = static_cast<float>(rng.uniform(0.0, 0.5)), y = static_cast<float>(rng.uniform(0.0, 0.5));
    s.boxes.insert(s.boxes.end(), {x, y, x + 0.4f, y + 0.3f});
  }
  const std::size_t n = words ? words : 1 + rng.below(c.max_text - 2);
  s.tokens.push_back(tokens::kCls);
  for (std::size_t i = 0; i < n; ++i)
    s.tokens.push_back(tokens::kFirstWordId + rng.below(c.vocab - tokens::kFirstWordId));
  s.tokens.push_back(tokens::kSep);
  return s;
}

template <class T>
double diff_to(const ref::Mat<T>& want, const Tensor& got_i, const Tensor& got_t) {
  const auto a = got_i.values(), b = got_t.values();
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(double(want.v[k]) - a[k]));
  for (std::size_t k = 0; k < b.size(); ++k)
    m = std::max(m, std::abs(double(want.v[a.size() + k]) - b[k]));
  return m;
}

TEST(Encoder, ForcedDefaultMatchesVanillaEncoderF32) {
  const auto start = std::chrono::steady_clock::now();
  EncoderConfig c = small_config(DType::F32);
  c.init_std = EncoderConfig{}.init_std;
  SwitchBertModel model(c, 11);
  const RouteOverrides force = RouteOverrides::parse("SAB:*=M3,SIB:*=0");
  ForwardOptions opts;
  opts.overrides = &force;
  Rng rng(99);
  double worst = 0.0;
  for (int b = 0; b < 50; ++b) {
    const MultimodalSample s = random_sample(model.config(), rng);
    const EncoderOutput out = encoder_forward(model, s, opts);
    worst = std::max(worst, diff_to(ref::vanilla_encoder<double>(model, s), out.x_i, out.x_t));
  }
  EXPECT_LT(worst, 1e-6);
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 10.0);
}

TEST(Encoder, ForcedDefaultMatchesVanillaEncoderF64) {
  SwitchBertModel model(small_config(), 12);
  const RouteOverrides force = RouteOverrides::parse("SAB:*=M3,SIB:*=0");
  ForwardOptions opts;
  opts.mode = RouteMode::Train;
  opts.tau = 0.7;
  opts.overrides = &force;
  Rng rng(5);
  for (int b = 0; b < 10; ++b) {
    const MultimodalSample s = random_sample(model.config(), rng);
    const EncoderOutput out = encoder_forward(model, s, opts);
    EXPECT_LT(diff_to(ref::vanilla_encoder<double>(model, s), out.x_i, out.x_t), 1e-10);
  }
}

TEST(Encoder, TraceHasSabAndSibDecisionsInOrder) {
  EncoderConfig c = small_config();
  c.layers = 4;
  SwitchBertModel model(c, 3);
  Rng rng(1);
  const EncoderOutput out = encoder_forward(model, random_sample(c, rng), {});
  ASSERT_EQ(out.decisions.size(), 7u);
  EXPECT_EQ(out.decisions[0].block, BlockKind::SAB);
  EXPECT_EQ(out.decisions[0].layer, 1);
  for (int l = 2; l <= 4; ++l) {
    EXPECT_EQ(out.decisions[2 * l - 3].block, BlockKind::SIB);
    EXPECT_EQ(out.decisions[2 * l - 3].layer, l);
    EXPECT_EQ(out.decisions[2 * l - 2].block, BlockKind::SAB);
    EXPECT_EQ(out.decisions[2 * l - 2].layer, l);
  }
}

TEST(Encoder, InferenceIsDeterministic) {
  SwitchBertModel model(small_config(), 4);
  Rng rng(2);
  const MultimodalSample s = random_sample(model.config(), rng);
  const EncoderOutput a = encoder_forward(model, s, {});
  const EncoderOutput b = encoder_forward(model, s, {});
  EXPECT_EQ(a.x_t.values(), b.x_t.values());
  EXPECT_EQ(a.x_i.values(), b.x_i.values());
  for (std::size_t k = 0; k < a.decisions.size(); ++k) {
    EXPECT_EQ(a.decisions[k].choice, b.decisions[k].choice);
    EXPECT_EQ(a.decisions[k].pi, b.decisions[k].pi);
  }
}

TEST(Encoder, SelfSelfModeKeepsModalitiesApart) {
  SwitchBertModel model(small_config(), 8);
  const RouteOverrides force = RouteOverrides::parse("SAB:*=M0,SIB:*=0");
  ForwardOptions opts;
  opts.overrides = &force;
  Rng rng(6);
  MultimodalSample a = random_sample(model.config(), rng, 3, 4);
  MultimodalSample b = a;
  for (auto& f : b.features) f += 1.5f;
  b.tokens[2] = b.tokens[2] == 7 ? 8 : 7;
  const EncoderOutput oa = encoder_forward(model, a, opts), ob = encoder_forward(model, b, opts);
  EXPECT_NE(oa.x_i.values(), ob.x_i.values());
  EXPECT_NE(oa.x_t.values(), ob.x_t.values());

  MultimodalSample only_img = a;
  only_img.features = b.features;
  const EncoderOutput oi = encoder_forward(model, only_img, opts);
  EXPECT_EQ(oi.x_t.values(), oa.x_t.values());
  MultimodalSample only_txt = a;
  only_txt.tokens = b.tokens;
  const EncoderOutput ot = encoder_forward(model, only_txt, opts);
  EXPECT_EQ(ot.x_i.values(), oa.x_i.values());
}

TEST(Encoder, JointModeMixesModalities) {
  SwitchBertModel model(small_config(), 8);
  const RouteOverrides force = RouteOverrides::parse("SAB:*=M3,SIB:*=0");
  ForwardOptions opts;
  opts.overrides = &force;
  Rng rng(6);
  MultimodalSample a = random_sample(model.config(), rng, 3, 4);
  MultimodalSample b = a;
  for (auto& f : b.features) f += 1.5f;
  EXPECT_NE(encoder_forward(model, a, opts).x_t.values(), encoder_forward(model, b, opts).x_t.values());
}

TEST(Encoder, PaddingIsNeutral) {
  SwitchBertModel model(small_config(), 21);
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const MultimodalSample s = random_sample(model.config(), rng, 2, 3);
    MultimodalSample p = s;
    p.regions = 4;
    for (std::size_t i = 0; i < 2 * model.config().feature_dim; ++i) p.features.push_back(float(rng.normal()));
    p.boxes.insert(p.boxes.end(), {0.1f, 0.1f, 0.2f, 0.2f, 0.3f, 0.3f, 0.9f, 0.9f});
    p.img_pad = {0, 0, 0, 1, 1};
    p.tokens.insert(p.tokens.end(), {tokens::kPad, tokens::kPad, tokens::kPad});
    p.txt_pad = {0, 0, 0, 0, 0, 1, 1, 1};

    ForwardOptions opts;
    Rng noise_a(trial), noise_b(trial);
    opts.mode = RouteMode::Train;
    opts.tau = 1.3;
    opts.noise = &noise_a;
    const EncoderOutput os = encoder_forward(model, s, opts);
    opts.noise = &noise_b;
    const EncoderOutput op = encoder_forward(model, p, opts);
    for (std::size_t k = 0; k < os.x_i.numel(); ++k) EXPECT_NEAR(os.x_i.at(k), op.x_i.at(k), 1e-6);
    for (std::size_t k = 0; k < os.x_t.numel(); ++k) EXPECT_NEAR(os.x_t.at(k), op.x_t.at(k), 1e-6);
    for (std::size_t k = 0; k < os.decisions.size(); ++k) {
      EXPECT_EQ(os.decisions[k].choice, op.decisions[k].choice);
      for (std::size_t n = 0; n < 4; ++n) EXPECT_NEAR(os.decisions[k].p[n], op.decisions[k].p[n], 1e-6);
    }
  }
}

TEST(Encoder, RejectsMalformedSamples) {
  SwitchBertModel model(small_config(), 1);
  Rng rng(3);
  MultimodalSample s = random_sample(model.config(), rng, 2, 2);
  MultimodalSample bad = s;
  bad.features.pop_back();
  EXPECT_THROW(encoder_forward(model, bad, {}), DimensionError);
  bad = s;
  bad.regions = 0;
  bad.features.clear();
  bad.boxes.clear();
  EXPECT_THROW(encoder_forward(model, bad, {}), ContractError);
  bad = s;
  bad.tokens[1] = model.config().vocab;
  EXPECT_THROW(encoder_forward(model, bad, {}), ContractError);
  bad = random_sample(model.config(), rng, 2, model.config().max_text);
  EXPECT_THROW(encoder_forward(model, bad, {}), ContractError);
  bad = s;
  bad.txt_pad = {0, 1};
  EXPECT_THROW(encoder_forward(model, bad, {}), DimensionError);
}

TEST(Embedding, TextAndVisualShapes) {
  SwitchBertModel model(small_config(), 2);
  const std::size_t ids[] = {1, 7, 9, 2}, pos[] = {0, 1, 2, 3};
  const Tensor t = embed_text(ids, pos, model.embeddings(), 1e-5);
  EXPECT_EQ(t.shape(), (Shape{4, 32}));
  Rng rng(4);
  const Tensor v = embed_visual(test::random_tensor({3, 6}, rng),
                                Tensor::from_values({3, 4}, {0, 0, .5, .5, .1, .1, .2, .9, 0, 0, 1, 1}, DType::F64),
                                model.embeddings(), 1e-5);
  EXPECT_EQ(v.shape(), (Shape{4, 32}));
  for (std::size_t r = 0; r < 4; ++r) {
    double mean = 0.0;
    for (std::size_t j = 0; j < 32; ++j) mean += v.at(r * 32 + j);
    EXPECT_NEAR(mean / 32, 0.0, 1e-9);
  }
  const std::size_t far[] = {0, 1, 2, 99};
  EXPECT_THROW(embed_text(ids, far, model.embeddings(), 1e-5), ContractError);
  EXPECT_THROW(embed_text(ids, std::span<const std::size_t>(pos, 3), model.embeddings(), 1e-5), DimensionError);
  EXPECT_THROW(embed_visual(test::random_tensor({3, 6}, rng), Tensor::full({3, 4}, 1.5, DType::F64),
                            model.embeddings(), 1e-5),
               ContractError);
}

TEST(Embedding, PositionAndTypeMatter) {
  SwitchBertModel model(small_config(), 2);
  const std::size_t ids[] = {7, 7}, pos[] = {0, 1};
  const Tensor t = embed_text(ids, pos, model.embeddings(), 1e-5);
  const auto v = t.values();
  EXPECT_NE(std::vector<double>(v.begin(), v.begin() + 32), std::vector<double>(v.begin() + 32, v.end()));
}

struct SibFixture : ::testing::Test {
  EncoderState state;
  SibFixture() {
    for (int d = 0; d < 4; ++d) {
      state.img.push_back(Tensor::full({2, 3}, 10.0 * d + 1, DType::F64));
      state.txt.push_back(Tensor::full({3, 3}, 10.0 * d + 2, DType::F64));
    }
  }
};

TEST_F(SibFixture, CandidatesFollowLayerOrder) {
  for (int l : {2, 3}) {
    const auto c = sib_candidates(state, l);
    const double a = 10.0 * (l - 1), b = 10.0 * (l - 2);
    EXPECT_EQ(c[0].x_i.at(0), a + 1);
    EXPECT_EQ(c[0].x_t.at(0), a + 2);
    EXPECT_EQ(c[1].x_i.at(0), a + 1);
    EXPECT_EQ(c[1].x_t.at(0), b + 2);
    EXPECT_EQ(c[2].x_i.at(0), b + 1);
    EXPECT_EQ(c[2].x_t.at(0), a + 2);
    EXPECT_EQ(c[3].x_i.at(0), b + 1);
    EXPECT_EQ(c[3].x_t.at(0), b + 2);
  }
  EXPECT_THROW(sib_candidates(state, 1), ContractError);
  EXPECT_THROW(sib_candidates(state, 5), ContractError);
}

TEST_F(SibFixture, UniformMixtureAveragesCandidates) {
  EncoderState s;
  s.img = {Tensor::full({1, 2}, 3.0, DType::F64), Tensor::full({1, 2}, 1.0, DType::F64)};
  s.txt = {Tensor::full({1, 2}, 4.0, DType::F64), Tensor::full({1, 2}, 2.0, DType::F64)};
  const auto c = sib_candidates(s, 2);
  const Tensor p = Tensor::full({4}, 0.25, DType::F64);
  const Tensor xi[] = {c[0].x_i, c[1].x_i, c[2].x_i, c[3].x_i};
  const Tensor xt[] = {c[0].x_t, c[1].x_t, c[2].x_t, c[3].x_t};
  EXPECT_DOUBLE_EQ(combine_soft(p, xi).at(0), 2.0);
  EXPECT_DOUBLE_EQ(combine_soft(p, xt).at(0), 3.0);
}

TEST(Sib, IdentityLayerMakesOutputInvariantToRoute) {
  SwitchBertModel model(small_config(), 5);
  ParamStore store;
  Rng rng(2);
  const RouterParams router = make_router_params(store, "sib.x", 32, 4, DType::F64, rng, 0.5);
  EncoderState s;
  const Tensor xi = test::random_tensor({3, 32}, rng), xt = test::random_tensor({4, 32}, rng);
  s.img = {xi, xi};
  s.txt = {xt, xt};
  const SequenceLayout layout = SequenceLayout::build(3, 4, {}, {});
  Rng noise(1);
  ForwardOptions opts;
  opts.mode = RouteMode::Train;
  opts.noise = &noise;
  for (int k = 0; k < 5; ++k) {
    const SibResult r = sib_forward(s, 2, layout, router, opts, 4);
    EXPECT_LT(test::max_abs_diff(r.x_i, xi), 1e-12);
    EXPECT_LT(test::max_abs_diff(r.x_t, xt), 1e-12);
  }
}

TEST(Flops, CountMatchesExecutedMatmuls) {
  EncoderConfig c = small_config(DType::F32);
  c.layers = 3;
  SwitchBertModel model(c, 7);
  Rng rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    const MultimodalSample s = random_sample(c, rng);
    reset_forward_matmul_flops();
    const EncoderOutput out = encoder_forward(model, s, {});
    const std::uint64_t measured = forward_matmul_flops();
    EXPECT_EQ(count_flops(c, s.n_img(), s.n_txt(), out.decisions).total(), measured);
  }
}

TEST(Flops, MonotoneInActiveModes) {
  const EncoderConfig c;
  const auto f1 = count_flops(c, 8, 16, 1).total(), f2 = count_flops(c, 8, 16, 2).total(),
             f4 = count_flops(c, 8, 16, 4).total();
  EXPECT_LT(f1, f2);
  EXPECT_LT(f2, f4);
  EXPECT_THROW(count_flops(c, 8, 16, 0), ContractError);
  EXPECT_THROW(count_flops(c, 0, 16, 1), ContractError);
}

TEST(Flops, JointScoresCostAtLeastSelfSelf) {
  EncoderConfig c = small_config(DType::F32);
  c.layers = 2;
  SwitchBertModel model(c, 1);
  Rng rng(3);
  const MultimodalSample s = random_sample(c, rng, 4, 4);
  auto scores = [&](const char* force) {
    const RouteOverrides o = RouteOverrides::parse(force);
    ForwardOptions opts;
    opts.overrides = &o;
    return count_flops(c, s.n_img(), s.n_txt(), encoder_forward(model, s, opts).decisions).scores;
  };
  EXPECT_GE(scores("SAB:*=M3,SIB:*=0"), scores("SAB:*=M0,SIB:*=0"));
}

TEST(Encoder, GradientsReachEveryParameter) {
  EncoderConfig c = small_config();
  c.dim = 8;
  c.heads = 2;
  c.ffn_dim = 16;
  c.max_visual = 4;
  c.max_text = 6;
  c.itm_readout = ItmReadout::Fused;
  SwitchBertModel model(c, 13);
  Rng rng(4);
  const MultimodalSample s = random_sample(c, rng, 2, 2);
  ForwardOptions opts;
  opts.mode = RouteMode::Train;
  opts.tau = 1.0;
  auto f = [&] {
    Rng n(123);
    ForwardOptions o = opts;
    o.noise = &n;
    const EncoderOutput out = encoder_forward(model, s, o);
    return add(scale(sum(mul(out.x_t, out.x_t)), 1.0 / double(out.x_t.numel())), scale(sum(out.fused), 0.1));
  };
  const auto cmp = test::check_gradients(model.params(), f, 1e-6);
  EXPECT_LT(cmp.max_rel_err, 1e-4) << cmp.worst_param << "[" << cmp.worst_index << "] "
                                   << cmp.worst_analytic << " vs " << cmp.worst_numeric;
}

}  // namespace
}  // namespace switchbert
