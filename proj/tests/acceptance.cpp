// Acceptance run: one PASS/FAIL line per criterion on stdout, details on
// stderr. `acceptance 3 4` runs a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "reference.hpp"
#include "switchbert/checkpoint.hpp"
#include "switchbert/objectives.hpp"
#include "switchbert/ops.hpp"
#include "switchbert/trace.hpp"
#include "switchbert/trainer.hpp"

namespace {

using namespace switchbert;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

fs::path workdir() {
  const fs::path p = fs::temp_directory_path() / "switchbert_acceptance";
  fs::create_directories(p);
  return p;
}

// 1 --------------------------------------------------------------------------

MultimodalSample random_sample(const EncoderConfig& c, Rng& rng) {
  MultimodalSample s;
  s.regions = 1 + rng.below(c.max_visual - 1);
  for (std::size_t i = 0; i < s.regions * c.feature_dim; ++i) s.features.push_back(float(rng.normal()));
  for (std::size_t r = 0; r < s.regions; ++r) {
    const float x = float(rng.uniform(0, 0.5)), y = float(rng.uniform(0, 0.5));
    s.boxes.insert(s.boxes.end(), {x, y, x + float(rng.uniform(0.05, 0.5)), y + float(rng.uniform(0.05, 0.5))});
  }
  s.tokens.push_back(tokens::kCls);
  const std::size_t n = 1 + rng.below(c.max_text - 2);
  for (std::size_t i = 0; i < n; ++i) s.tokens.push_back(tokens::kFirstWordId + rng.below(c.vocab - tokens::kFirstWordId));
  s.tokens.push_back(tokens::kSep);
  return s;
}

Outcome forced_default_equivalence() {
  const auto t0 = Clock::now();
  EncoderConfig c;
  c.layers = 2;
  c.dim = 32;
  c.heads = 4;
  c.ffn_dim = 128;
  c.dtype = DType::F32;
  SwitchBertModel model(c, 20240);
  const RouteOverrides force = RouteOverrides::parse("SAB:*=M3,SIB:*=0");
  ForwardOptions opts;
  opts.overrides = &force;
  Rng rng(1);
  double worst = 0.0;
  for (int batch = 0; batch < 50; ++batch)
    for (int k = 0; k < 4; ++k) {
      const MultimodalSample s = random_sample(c, rng);
      const EncoderOutput out = encoder_forward(model, s, opts);
      const auto want = ref::vanilla_encoder<double>(model, s);
      const auto a = out.x_i.values(), b = out.x_t.values();
      for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(want.v[i] - a[i]));
      for (std::size_t i = 0; i < b.size(); ++i)
        worst = std::max(worst, std::abs(want.v[a.size() + i] - b[i]));
    }
  const double secs = seconds_since(t0);
  return {worst < 1e-6 && secs < 10.0, fmt("max|diff| %.3g over 50 batches of 4, %.2f s", worst, secs)};
}

// 2 --------------------------------------------------------------------------

Outcome gradient_fidelity() {
  const GradcheckReport r = run_gradcheck(gradcheck_config(), GradcheckOptions{});
  return {r.passed && r.comparison.max_rel_err < 1e-4 && r.seconds < 60.0,
          fmt("max rel err %.3g (worst ", r.comparison.max_rel_err) + r.comparison.worst_param +
              fmt("), %g coordinates, %.1f s", double(r.comparison.coordinates), r.seconds)};
}

// 3 --------------------------------------------------------------------------

Outcome mask_oracle() {
  std::size_t mismatches = 0, union_fail = 0, cases = 0;
  for (std::size_t ni = 1; ni <= 5; ++ni)
    for (std::size_t nt = 1; nt <= 5; ++nt) {
      std::array<AttentionMask, kNumModes> m;
      for (std::size_t k = 0; k < kNumModes; ++k) {
        m[k] = build_mode_mask(mode_from_index(k), ni, nt, {});
        for (std::size_t r = 0; r < ni + nt; ++r)
          for (std::size_t col = 0; col < ni + nt; ++col)
            mismatches += m[k].at(r, col) != ref::mode_allowed(mode_from_index(k), ni, r, col);
      }
      for (std::size_t i = 0; i < m[3].allowed.size(); ++i)
        union_fail += m[3].allowed[i] != (m[0].allowed[i] | m[1].allowed[i] | m[2].allowed[i]);
      ++cases;
    }
  return {mismatches == 0 && union_fail == 0,
          fmt("%g geometries, %g mask mismatches, %g union mismatches", double(cases), double(mismatches),
              double(union_fail))};
}

// 4 --------------------------------------------------------------------------

Outcome routing_limits() {
  Rng rng(4);
  auto random_pi = [&] {
    std::vector<double> z(4);
    for (auto& v : z) v = rng.normal();
    return softmax_lastdim(Tensor::from_values({4}, z, DType::F64));
  };
  const Tensor pi = random_pi();
  const auto noise = sample_gumbel(rng, 4);
  const Tensor p = gumbel_softmax(pi, 0.01, noise);
  double worst = 0.0;
  for (int set = 0; set < 100; ++set) {
    std::vector<Tensor> cands;
    for (int n = 0; n < 4; ++n) {
      std::vector<double> v(12);
      for (auto& x : v) x = rng.normal();
      cands.push_back(Tensor::from_values({3, 4}, v, DType::F64));
    }
    const auto soft = combine_soft(p, cands).values(), hard = select_hard(p, cands).first.values();
    for (std::size_t i = 0; i < soft.size(); ++i) worst = std::max(worst, std::abs(soft[i] - hard[i]));
  }
  std::size_t entropy_fail = 0, argmax_fail = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor q = random_pi();
    const auto g = sample_gumbel(rng, 4);
    double prev = -1.0;
    for (double tau : {0.1, 0.5, 1.0, 5.0}) {
      double h = 0.0;
      for (double v : gumbel_softmax(q, tau, g).values())
        if (v > 0) h -= v * std::log(v);
      entropy_fail += h < prev - 1e-12;
      prev = h;
      argmax_fail += argmax_lowest(gumbel_softmax(q, tau).values()) != argmax_lowest(q.values());
    }
  }
  return {worst < 1e-3 && entropy_fail == 0 && argmax_fail == 0,
          fmt("max|soft-hard| %.3g at tau 0.01, %g entropy inversions, %g argmax changes", worst,
              double(entropy_fail), double(argmax_fail))};
}

// 5-8: trained 4-way models ----------------------------------------------------

TrainConfig fourway_config(std::uint64_t seed) {
  TrainConfig c;
  c.task = Task::Fourway;
  c.seed = seed;
  c.data.max_objects = 3;
  c.adam.lr = 3e-4;
  c.log_every = 500;
  c.validate();
  return c;
}

struct Run {
  double accuracy = 0.0;
  double seconds = 0.0;
};

std::map<std::string, Run> g_runs;
std::optional<SwitchBertModel> g_full_seed0;

Run run(const std::string& key, TrainConfig c) {
  if (auto it = g_runs.find(key); it != g_runs.end()) return it->second;
  c.validate();
  std::cerr << "[train] " << key << "\n";
  const auto t0 = Clock::now();
  SwitchBertModel model(c.model, 0);
  train(c, &model);
  Run r;
  r.seconds = seconds_since(t0);
  r.accuracy = evaluate(model, c, {}).accuracy;
  std::cerr << "[train] " << key << fmt(" accuracy %.4f after %.0f s\n", r.accuracy, r.seconds);
  if (key == "full/0") g_full_seed0.emplace(std::move(model));
  return g_runs[key] = r;
}

TrainConfig variant(const std::string& kind, std::uint64_t seed) {
  TrainConfig c = fourway_config(seed);
  if (kind == "m0") c.force_route = "SAB:*=M0,SIB:*=0";
  if (kind == "joint") c.model.mode_space = parse_mode_space("joint");
  if (kind == "cross") c.model.mode_space = parse_mode_space("cross");
  if (kind == "k2") c.model.sab_topk = c.model.sib_topk = 2;
  return c;
}

double mean_accuracy(const std::string& kind) {
  double s = 0.0;
  for (std::uint64_t seed : {0, 1, 2}) s += run(kind + "/" + std::to_string(seed), variant(kind, seed)).accuracy;
  return s / 3.0;
}

Outcome interaction_necessity() {
  const Run full = run("full/0", variant("full", 0));
  const Run m0 = run("m0/0", variant("m0", 0));
  const bool ok = full.accuracy >= 0.60 && std::abs(m0.accuracy - 0.25) <= 0.03 &&
                  full.accuracy - m0.accuracy >= 0.35;
  return {ok && full.seconds < 900 && m0.seconds < 900,
          fmt("full %.1f%% (%.0f s), frozen M0 %.1f%% (%.0f s), ", 100 * full.accuracy, full.seconds,
              100 * m0.accuracy, m0.seconds) +
              fmt("gap %.1f points", 100 * (full.accuracy - m0.accuracy))};
}

Outcome ablation_direction() {
  const double full = mean_accuracy("full"), joint = mean_accuracy("joint"), cross = mean_accuracy("cross");
  const bool ok = full >= joint - 0.005 && full >= cross - 0.005;
  return {ok, fmt("3-seed mean accuracy: full %.2f%%, joint-only %.2f%%, cross-only %.2f%%", 100 * full,
                  100 * joint, 100 * cross)};
}

Outcome topk_overhead() {
  const EncoderConfig c;
  const std::uint64_t f1 = count_flops(c, c.max_visual, c.max_text, 1).total(),
                      f2 = count_flops(c, c.max_visual, c.max_text, 2).total(),
                      f4 = count_flops(c, c.max_visual, c.max_text, 4).total();
  const double k4 = mean_accuracy("full"), k2 = mean_accuracy("k2");
  const bool ok = f1 < f2 && f2 < f4 && k2 >= k4 - 0.02;
  return {ok, fmt("FLOPs K=1 %.0f < K=2 %.0f < K=4 %.0f; ", double(f1), double(f2), double(f4)) +
                  fmt("3-seed accuracy K=2 %.2f%% vs K=4 %.2f%%", 100 * k2, 100 * k4)};
}

Outcome architecture_extraction() {
  run("full/0", variant("full", 0));
  const TrainConfig c = variant("full", 0);
  ArchitectureReport reps[2];
  for (int pass = 0; pass < 2; ++pass) {
    EvalOptions o;
    o.trace = (workdir() / ("arch_pass" + std::to_string(pass) + ".jsonl")).string();
    fs::remove(o.trace);
    evaluate(*g_full_seed0, c, o);
    reps[pass] = extract_architecture(read_trace(o.trace));
  }
  double total = 0.0;
  for (const auto& e : reps[0].entries) total += e.percent;
  const bool ok = !reps[0].entries.empty() && std::abs(total - 100.0) <= 0.1 &&
                  reps[0].entries.front().path == reps[1].entries.front().path &&
                  reps[0].skipped == 0;
  return {ok, "top path \"" + reps[0].entries.front().path + "\"" +
                  fmt(" at %.2f%% of %g samples, %g distinct, total %.3f%%", reps[0].entries.front().percent,
                      double(reps[0].samples), double(reps[0].entries.size()), total)};
}

// 9 --------------------------------------------------------------------------

Outcome loss_sanity() {
  TrainConfig c;
  c.task = Task::Pretrain;
  c.model.layers = 2;
  c.model.dim = 32;
  c.model.heads = 4;
  c.model.ffn_dim = 128;
  c.steps = 200;
  c.log_every = 50;
  c.validate();
  SwitchBertModel untrained(c.model, 0);
  const double mlm0 = evaluate(untrained, c, {}).mlm_loss;
  SwitchBertModel model(c.model, 0);
  const TrainResult tr = train(c, &model);
  const double mlm1 = evaluate(model, c, {}).mlm_loss;

  Rng rng(9);
  double min_kl = 1e9, max_equal = 0.0;
  for (int i = 0; i < 200; ++i) {
    HeadParams h;
    std::vector<double> w(4 * 6), b(6), x(2 * 4), t(2 * 6);
    for (auto& v : w) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    for (auto& v : x) v = rng.normal();
    h.mrc_w = Tensor::from_values({4, 6}, w, DType::F64);
    h.mrc_b = Tensor::from_values({6}, b, DType::F64);
    const Tensor states = Tensor::from_values({2, 4}, x, DType::F64);
    for (auto& v : t) v = rng.normal();
    const auto target = softmax_lastdim(Tensor::from_values({2, 6}, t, DType::F64)).values();
    min_kl = std::min(min_kl, mrc_kl_loss(states, target, h).item());
    const auto predicted = softmax_lastdim(linear(states, h.mrc_w, h.mrc_b)).values();
    max_equal = std::max(max_equal, std::abs(mrc_kl_loss(states, predicted, h).item()));
  }
  const bool ok = std::abs(mlm0 - std::log(1000.0)) <= 0.1 && mlm1 < 5.5 && min_kl >= 0.0 && max_equal < 1e-8;
  return {ok, fmt("untrained MLM %.4f (ln 1000 = 6.9078), after 200 steps %.3f held-out / %.3f train; ", mlm0,
                  mlm1, tr.final_mlm) +
                  fmt("min MRC-KL %.3g, |KL| on equal probes <= %.3g", min_kl, max_equal)};
}

// 10 -------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome reproducibility() {
  bool same = true;
  for (Task task : {Task::Fourway, Task::Pretrain}) {
    TrainConfig c = gradcheck_config();
    c.task = task;
    c.model.dtype = DType::F32;
    c.corpus_size = 500;
    c.eval_corpus_size = 100;
    c.steps = 30;
    c.batch = 4;
    c.ckpt = (workdir() / "repro.swbt").string();
    c.validate();
    train(c);
    const std::string first = slurp(c.ckpt);
    train(c);
    same = same && !first.empty() && slurp(c.ckpt) == first;
  }
  TrainConfig c = fourway_config(0);
  SwitchBertModel model(c.model, 0);
  c.steps = 5;
  c.log_every = 0;
  train_model(model, c);
  const fs::path p = workdir() / "roundtrip.swbt";
  save_training_checkpoint(model, c, nullptr, c.steps, p.string());
  const SwitchBertModel back = load_model(p.string());
  const Corpus corpus = evaluation_corpus(c);
  std::size_t differing = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    const MultimodalSample s = corpus.samples[i].to_input();
    const EncoderOutput a = encoder_forward(model, s, {}), b = encoder_forward(back, s, {});
    differing += a.x_i.values() != b.x_i.values() || a.x_t.values() != b.x_t.values() ||
                 itm_score(model, a).item() != itm_score(back, b).item();
  }
  return {same && differing == 0,
          std::string(same ? "repeat runs bit-identical" : "repeat runs DIFFER") +
              fmt("; %g of 50 round-trip forwards differ", double(differing))};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"forced-default equivalence", forced_default_equivalence},
      {"gradient fidelity", gradient_fidelity},
      {"mask correctness oracle", mask_oracle},
      {"routing limits", routing_limits},
      {"interaction necessity", interaction_necessity},
      {"mode-space ablation direction", ablation_direction},
      {"top-k overhead ordering", topk_overhead},
      {"architecture extraction", architecture_extraction},
      {"loss sanity", loss_sanity},
      {"reproducibility and persistence", reproducibility},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << ". " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
