#include <benchmark/benchmark.h>

#include "switchbert/encoder.hpp"
#include "switchbert/ops.hpp"
#include "switchbert/synth.hpp"

namespace {

using namespace switchbert;

Tensor filled(std::size_t r, std::size_t c, Rng& rng) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = rng.normal();
  return Tensor::from_values({r, c}, v);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = filled(n, n, rng), b = filled(n, n, rng);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(256);

void BM_MaskedAttention(benchmark::State& state) {
  const auto mode = static_cast<InteractionMode>(state.range(0));
  ParamStore store;
  Rng rng(2);
  const LayerParams layer = make_layer_params(store, "layer.1", 64, 4, 256, DType::F32, rng, 0.02, 1e-5);
  const Tensor x = filled(24, 64, rng);
  const AttentionMask mask = build_mode_mask(mode, 8, 16, {});
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(generalized_mha(x, mask, layer));
}
BENCHMARK(BM_MaskedAttention)->DenseRange(0, 3);

struct EncoderBench {
  SwitchBertModel model{EncoderConfig{}, 3};
  std::vector<MultimodalSample> inputs;
  EncoderBench() {
    SynthConfig sc;
    const Corpus corpus = gen_corpus(16, sc, 4);
    for (const auto& s : corpus.samples) inputs.push_back(s.to_input());
  }
};

void BM_EncoderInfer(benchmark::State& state) {
  EncoderBench b;
  NoGradGuard guard;
  std::size_t i = 0;
  for (auto _ : state) benchmark::DoNotOptimize(encoder_forward(b.model, b.inputs[i++ % 16], {}));
}
BENCHMARK(BM_EncoderInfer)->Unit(benchmark::kMicrosecond);

void BM_EncoderTrainStep(benchmark::State& state) {
  EncoderBench b;
  Rng noise(5);
  ForwardOptions opts;
  opts.mode = RouteMode::Train;
  opts.tau = 1.0;
  opts.noise = &noise;
  opts.sab_topk = static_cast<std::size_t>(state.range(0));
  std::size_t i = 0;
  for (auto _ : state) {
    b.model.params().zero_grad();
    const EncoderOutput out = encoder_forward(b.model, b.inputs[i++ % 16], opts);
    sum(itm_score(b.model, out)).backward();
  }
}
BENCHMARK(BM_EncoderTrainStep)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
