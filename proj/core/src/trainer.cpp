#include "switchbert/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>

#include <nlohmann/json.hpp>

#include "switchbert/checkpoint.hpp"
#include "switchbert/objectives.hpp"
#include "switchbert/ops.hpp"
#include "switchbert/trace.hpp"

namespace switchbert {

using nlohmann::json;

namespace {

// Stream ids for derive_seed(seed, step, stream).
constexpr std::uint64_t kDataStream = 1;
constexpr std::uint64_t kNoiseStream = 2;
constexpr std::uint64_t kCorpusStream = 0xC0;

std::size_t get_size(const json& v, const std::string& key) {
  if (!v.is_number_integer() && !v.is_number_unsigned())
    throw ConfigError("config: '" + key + "' must be a non-negative integer");
  if (v.is_number_integer() && v.get<std::int64_t>() < 0)
    throw ConfigError("config: '" + key + "' must be a non-negative integer");
  return v.get<std::size_t>();
}

double get_double(const json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError("config: '" + key + "' must be a number");
  return v.get<double>();
}

std::string get_string(const json& v, const std::string& key) {
  if (!v.is_string()) throw ConfigError("config: '" + key + "' must be a string");
  return v.get<std::string>();
}

// [n×1] column of one-element tensors.
Tensor stack(const std::vector<Tensor>& scalars) {
  std::vector<Tensor> rows;
  rows.reserve(scalars.size());
  for (const auto& t : scalars) rows.push_back(reshape(t, {1, 1}));
  return concat_rows(rows);
}

}  // namespace

const char* to_string(Task task) noexcept {
  return task == Task::Pretrain ? "pretrain" : "fourway";
}

Task parse_task(const std::string& text) {
  if (text == "pretrain") return Task::Pretrain;
  if (text == "fourway" || text == "finetune") return Task::Fourway;
  throw ConfigError("unknown task '" + text + "'");
}

void TrainConfig::validate() {
  model.validate();
  data.num_classes = model.num_classes;
  data.feature_dim = model.feature_dim;
  data.vocab = model.vocab;
  data.max_text = model.max_text;
  data.validate();
  if (data.max_objects + 1 > model.max_visual)
    throw ConfigError("max_visual must hold IMG plus max_objects regions");
  if (batch == 0) throw ConfigError("batch must be positive");
  if (!(tau_min > 0.0)) throw ConfigError("tau_min must be positive");
  if (!(tau0 >= tau_min)) throw ConfigError("tau0 must be at least tau_min");
  if (!(decay > 0.0 && decay <= 1.0)) throw ConfigError("decay must lie in (0, 1]");
  if (!(adam.lr >= 0.0)) throw ConfigError("lr must be non-negative");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    throw ConfigError("betas must lie in [0, 1)");
  if (!(adam.eps > 0.0)) throw ConfigError("eps must be positive");
  if (text_mask_rate < 0.0 || text_mask_rate > 1.0 || region_mask_rate < 0.0 ||
      region_mask_rate > 1.0)
    throw ConfigError("mask rates must lie in [0, 1]");
  if (corpus.empty() && corpus_size < 4) throw ConfigError("corpus_size must be at least 4");
  if (eval_corpus_size < 4) throw ConfigError("eval_corpus_size must be at least 4");
  if (!force_route.empty()) RouteOverrides::parse(force_route);
}

void apply_config_json(TrainConfig& c, const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  for (const auto& [key, v] : j.items()) {
    if (key == "task") c.task = parse_task(get_string(v, key));
    else if (key == "seed") c.seed = get_size(v, key);
    else if (key == "steps") c.steps = get_size(v, key);
    else if (key == "batch") c.batch = get_size(v, key);
    else if (key == "lr") c.adam.lr = get_double(v, key);
    else if (key == "beta1") c.adam.beta1 = get_double(v, key);
    else if (key == "beta2") c.adam.beta2 = get_double(v, key);
    else if (key == "eps") c.adam.eps = get_double(v, key);
    else if (key == "clip_norm") c.adam.clip_norm = get_double(v, key);
    else if (key == "tau0") c.tau0 = get_double(v, key);
    else if (key == "tau_min") c.tau_min = get_double(v, key);
    else if (key == "decay") c.decay = get_double(v, key);
    else if (key == "topk") c.model.sab_topk = c.model.sib_topk = get_size(v, key);
    else if (key == "sab_topk") c.model.sab_topk = get_size(v, key);
    else if (key == "sib_topk") c.model.sib_topk = get_size(v, key);
    else if (key == "layers") c.model.layers = get_size(v, key);
    else if (key == "dim") c.model.dim = get_size(v, key);
    else if (key == "heads") c.model.heads = get_size(v, key);
    else if (key == "ffn_dim") c.model.ffn_dim = get_size(v, key);
    else if (key == "vocab") c.model.vocab = get_size(v, key);
    else if (key == "feature_dim") c.model.feature_dim = get_size(v, key);
    else if (key == "num_classes") c.model.num_classes = get_size(v, key);
    else if (key == "max_visual") c.model.max_visual = get_size(v, key);
    else if (key == "max_text") c.model.max_text = get_size(v, key);
    else if (key == "init_std") c.model.init_std = get_double(v, key);
    else if (key == "ln_eps") c.model.ln_eps = get_double(v, key);
    else if (key == "dtype") {
      try {
        c.model.dtype = parse_dtype(get_string(v, key));
      } catch (const ConfigError&) {
        throw;
      } catch (const Error& e) {
        throw ConfigError(e.what());
      }
    } else if (key == "mode_space") c.model.mode_space = parse_mode_space(get_string(v, key));
    else if (key == "itm_readout") c.model.itm_readout = parse_readout(get_string(v, key));
    else if (key == "min_objects") c.data.min_objects = get_size(v, key);
    else if (key == "max_objects") c.data.max_objects = get_size(v, key);
    else if (key == "attr_std") c.data.attr_std = get_double(v, key);
    else if (key == "attr_max_norm") c.data.attr_max_norm = get_double(v, key);
    else if (key == "detector_scale") c.data.detector_scale = get_double(v, key);
    else if (key == "world_seed") c.data.world_seed = get_size(v, key);
    else if (key == "corpus_size") c.corpus_size = get_size(v, key);
    else if (key == "eval_groups") c.eval_groups = get_size(v, key);
    else if (key == "eval_corpus_size") c.eval_corpus_size = get_size(v, key);
    else if (key == "eval_seed") c.eval_seed = get_size(v, key);
    else if (key == "text_mask_rate") c.text_mask_rate = get_double(v, key);
    else if (key == "region_mask_rate") c.region_mask_rate = get_double(v, key);
    else if (key == "corpus") c.corpus = get_string(v, key);
    else if (key == "ckpt") c.ckpt = get_string(v, key);
    else if (key == "init") c.init = get_string(v, key);
    else if (key == "trace") c.trace = get_string(v, key);
    else if (key == "force_route") c.force_route = get_string(v, key);
    else if (key == "log_every") c.log_every = get_size(v, key);
    else throw ConfigError("config: unknown key '" + key + "'");
  }
}

std::string config_to_json(const TrainConfig& c) {
  json j;
  j["task"] = to_string(c.task);
  j["seed"] = c.seed;
  j["steps"] = c.steps;
  j["batch"] = c.batch;
  j["lr"] = c.adam.lr;
  j["beta1"] = c.adam.beta1;
  j["beta2"] = c.adam.beta2;
  j["eps"] = c.adam.eps;
  j["clip_norm"] = c.adam.clip_norm;
  j["tau0"] = c.tau0;
  j["tau_min"] = c.tau_min;
  j["decay"] = c.decay;
  j["sab_topk"] = c.model.sab_topk;
  j["sib_topk"] = c.model.sib_topk;
  j["layers"] = c.model.layers;
  j["dim"] = c.model.dim;
  j["heads"] = c.model.heads;
  j["ffn_dim"] = c.model.ffn_dim;
  j["vocab"] = c.model.vocab;
  j["feature_dim"] = c.model.feature_dim;
  j["num_classes"] = c.model.num_classes;
  j["max_visual"] = c.model.max_visual;
  j["max_text"] = c.model.max_text;
  j["init_std"] = c.model.init_std;
  j["ln_eps"] = c.model.ln_eps;
  j["dtype"] = to_string(c.model.dtype);
  j["mode_space"] = mode_space_str(c.model.mode_space);
  j["itm_readout"] = to_string(c.model.itm_readout);
  j["min_objects"] = c.data.min_objects;
  j["max_objects"] = c.data.max_objects;
  j["attr_std"] = c.data.attr_std;
  j["attr_max_norm"] = c.data.attr_max_norm;
  j["detector_scale"] = c.data.detector_scale;
  j["world_seed"] = c.data.world_seed;
  j["corpus_size"] = c.corpus_size;
  j["eval_groups"] = c.eval_groups;
  j["eval_corpus_size"] = c.eval_corpus_size;
  j["eval_seed"] = c.eval_seed;
  j["text_mask_rate"] = c.text_mask_rate;
  j["region_mask_rate"] = c.region_mask_rate;
  j["corpus"] = c.corpus;
  j["ckpt"] = c.ckpt;
  j["init"] = c.init;
  j["trace"] = c.trace;
  j["force_route"] = c.force_route;
  j["log_every"] = c.log_every;
  return j.dump();
}

double temperature_schedule(std::size_t step, double tau0, double tau_min, double decay) {
  return std::max(tau_min, tau0 * std::pow(decay, static_cast<double>(step)));
}

Corpus training_corpus(const TrainConfig& config) {
  if (!config.corpus.empty()) {
    Corpus c = load_corpus(config.corpus, config.data);
    if (c.samples.size() < 4) throw ConfigError("training corpus needs at least 4 samples");
    return c;
  }
  return gen_corpus(config.corpus_size, config.data, derive_seed(config.seed, kCorpusStream));
}

Corpus evaluation_corpus(const TrainConfig& config) {
  return gen_corpus(config.eval_corpus_size, config.data, config.eval_seed);
}

void save_training_checkpoint(const SwitchBertModel& model, const TrainConfig& config,
                              const Adam* optimizer, std::size_t step, const std::string& path) {
  std::map<std::string, std::string> meta;
  meta["config"] = config_to_json(config);
  meta["step"] = std::to_string(step);
  meta["rng"] = Rng(derive_seed(config.seed, step, kDataStream)).serialize();
  save_checkpoint(snapshot(model.params(), optimizer, std::move(meta)), path);
}

SwitchBertModel load_model(const std::string& path, TrainConfig* config_out) {
  Checkpoint ck = load_checkpoint(path);
  auto it = ck.meta.find("config");
  if (it == ck.meta.end()) throw FormatError("checkpoint '" + path + "' has no stored config");
  TrainConfig config;
  apply_config_json(config, it->second);
  config.validate();
  SwitchBertModel model(config.model, config.seed);
  restore_params(model.params(), ck);
  if (config_out) *config_out = config;
  return model;
}

namespace {

struct StepLosses {
  Tensor total;
  double mlm = 0.0;
  double mrc = 0.0;
  double itm = 0.0;
};

// Four soft forwards per group; the positive pair's decisions are traced.
StepLosses fourway_step(const SwitchBertModel& model, const Corpus& corpus,
                        const TrainConfig& config, std::size_t step, const ForwardOptions& opts,
                        Rng& data_rng, TraceWriter& trace, std::vector<RouteDecision>& traced) {
  std::vector<Tensor> group_losses;
  for (std::size_t b = 0; b < config.batch; ++b) {
    const std::size_t anchor = (step * config.batch + b) % corpus.samples.size();
    const FourwayGroup group = make_fourway_group(corpus, anchor, data_rng);
    std::vector<Tensor> scores;
    std::uint8_t labels[4] = {0, 0, 0, 0};
    labels[group.positive] = 1;
    for (std::size_t c = 0; c < 4; ++c) {
      const EncoderOutput out =
          encoder_forward(model, compose_pair(corpus, group.image[c], group.caption[c]), opts);
      scores.push_back(itm_score(model, out));
      if (c == group.positive) {
        trace.write(static_cast<std::int64_t>(step), static_cast<std::int64_t>(b), out.decisions);
        traced.insert(traced.end(), out.decisions.begin(), out.decisions.end());
      }
    }
    group_losses.push_back(itm_fourway_loss(stack(scores), labels));
  }
  StepLosses s;
  s.total = scale(sum(stack(group_losses)), 1.0 / static_cast<double>(config.batch));
  s.itm = s.total.item();
  return s;
}

// Masked forward for MLM + MRC-KL, then an unmasked forward on a positive or
// random-caption pair for the binary matching loss.
StepLosses pretrain_step(const SwitchBertModel& model, const Corpus& corpus,
                         const TrainConfig& config, std::size_t step, const ForwardOptions& opts,
                         Rng& data_rng, TraceWriter& trace, std::vector<RouteDecision>& traced) {
  std::vector<Tensor> mlm_terms, mrc_terms, itm_terms;
  const std::size_t n = corpus.samples.size();
  for (std::size_t b = 0; b < config.batch; ++b) {
    const std::size_t anchor = (step * config.batch + b) % n;
    const MultimodalSample input = corpus.samples[anchor].to_input();
    TextMasking tm = mask_text_tokens(input, config.text_mask_rate, config.model.vocab, data_rng);
    RegionMasking rm = mask_regions(tm.corrupted, config.region_mask_rate,
                                    config.model.num_classes, data_rng);
    const EncoderOutput out = encoder_forward(model, rm.corrupted, opts);
    trace.write(static_cast<std::int64_t>(step), static_cast<std::int64_t>(b), out.decisions);
    traced.insert(traced.end(), out.decisions.begin(), out.decisions.end());
    mlm_terms.push_back(mlm_loss(gather_states(out.x_t, tm.positions), tm.targets, model.heads()));
    if (!rm.positions.empty())
      mrc_terms.push_back(
          mrc_kl_loss(gather_states(out.x_i, rm.positions), rm.targets, model.heads()));

    const bool positive = data_rng.bernoulli(0.5);
    std::size_t caption = anchor;
    if (!positive) {
      do {
        caption = data_rng.below(n);
      } while (caption == anchor || corpus.samples[caption].tokens == corpus.samples[anchor].tokens);
    }
    const EncoderOutput pair = encoder_forward(model, compose_pair(corpus, anchor, caption), opts);
    itm_terms.push_back(itm_pair_loss(itm_score(model, pair), positive));
  }
  auto batch_mean = [](const std::vector<Tensor>& terms) {
    return scale(sum(stack(terms)), 1.0 / static_cast<double>(terms.size()));
  };
  StepLosses s;
  Tensor mlm = batch_mean(mlm_terms);
  Tensor itm = batch_mean(itm_terms);
  s.total = add(mlm, itm);
  s.mlm = mlm.item();
  s.itm = itm.item();
  if (!mrc_terms.empty()) {
    Tensor mrc = batch_mean(mrc_terms);
    s.mrc = mrc.item();
    s.total = add(s.total, mrc);
  }
  return s;
}

}  // namespace

TrainResult train_model(SwitchBertModel& model, const TrainConfig& config) {
  const auto started = std::chrono::steady_clock::now();
  const Corpus corpus = training_corpus(config);
  RouteOverrides overrides;
  if (!config.force_route.empty()) overrides = RouteOverrides::parse(config.force_route);
  TraceWriter trace;
  if (!config.trace.empty()) trace = TraceWriter(config.trace);

  Adam adam(model.params(), config.adam);
  TrainResult result;
  std::vector<RouteDecision> traced;
  for (std::size_t step = 0; step < config.steps; ++step) {
    Rng data_rng(derive_seed(config.seed, step, kDataStream));
    Rng noise_rng(derive_seed(config.seed, step, kNoiseStream));
    ForwardOptions opts;
    opts.mode = RouteMode::Train;
    opts.tau = temperature_schedule(step, config);
    opts.noise = &noise_rng;
    opts.overrides = overrides.empty() ? nullptr : &overrides;

    traced.clear();
    model.params().zero_grad();
    StepLosses losses = config.task == Task::Fourway
                            ? fourway_step(model, corpus, config, step, opts, data_rng, trace, traced)
                            : pretrain_step(model, corpus, config, step, opts, data_rng, trace, traced);
    const double loss = losses.total.item();
    if (!std::isfinite(loss)) {
      if (!config.ckpt.empty()) save_training_checkpoint(model, config, &adam, step, config.ckpt);
      throw NumericError("non-finite loss at step " + std::to_string(step));
    }
    losses.total.backward();
    StepLog log;
    log.step = step;
    log.loss = loss;
    log.tau = opts.tau;
    log.mlm = losses.mlm;
    log.mrc = losses.mrc;
    log.itm = losses.itm;
    log.grad_norm = adam.step();
    result.history.push_back(log);

    std::array<std::size_t, kNumModes> hist{};
    for (const auto& d : traced)
      if (d.block == BlockKind::SAB) ++hist[d.choice];
    for (std::size_t m = 0; m < kNumModes; ++m) result.sab_choices[m] += hist[m];
    if (config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.steps)) {
      std::cerr << "step " << step << " loss " << loss << " tau " << opts.tau << " |g| "
                << log.grad_norm;
      if (config.task == Task::Pretrain)
        std::cerr << " mlm " << log.mlm << " mrc " << log.mrc << " itm " << log.itm;
      std::cerr << " modes";
      for (std::size_t m = 0; m < kNumModes; ++m) std::cerr << ' ' << hist[m];
      std::cerr << '\n';
    }
  }
  trace.flush();
  if (!config.ckpt.empty()) save_training_checkpoint(model, config, &adam, config.steps, config.ckpt);

  result.steps = config.steps;
  result.trace_records = trace.records();
  if (!result.history.empty()) {
    result.final_loss = result.history.back().loss;
    result.first_mlm = result.history.front().mlm;
    auto tail_mean = [&](std::size_t count, auto field) {
      const std::size_t k = std::min(count, result.history.size());
      double s = 0.0;
      for (std::size_t i = result.history.size() - k; i < result.history.size(); ++i)
        s += field(result.history[i]);
      return s / static_cast<double>(k);
    };
    result.mean_loss_last = tail_mean(100, [](const StepLog& l) { return l.loss; });
    result.final_mlm = tail_mean(20, [](const StepLog& l) { return l.mlm; });
  }
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

TrainResult train(const TrainConfig& config, SwitchBertModel* model_out) {
  SwitchBertModel model(config.model, config.seed);
  if (!config.init.empty()) restore_params(model.params(), load_checkpoint(config.init));
  TrainResult r = train_model(model, config);
  if (model_out) *model_out = std::move(model);
  return r;
}

EvalResult evaluate(const SwitchBertModel& model, const TrainConfig& config,
                    const EvalOptions& options) {
  NoGradGuard no_grad;
  EvalResult r;
  r.task = config.task;
  const Corpus corpus =
      options.corpus.empty() ? evaluation_corpus(config) : load_corpus(options.corpus, config.data);
  if (corpus.samples.size() < 4) throw ConfigError("evaluation corpus needs at least 4 samples");
  const std::size_t groups = options.groups ? options.groups : config.eval_groups;
  TraceWriter trace;
  if (!options.trace.empty()) trace = TraceWriter(options.trace);

  ForwardOptions opts;
  opts.overrides = options.overrides;
  if (options.soft_tau) {
    opts.mode = RouteMode::Train;
    opts.tau = *options.soft_tau;
  }
  Rng rng(derive_seed(config.eval_seed, kDataStream));
  r.groups = groups;

  if (config.task == Task::Fourway) {
    double correct = 0.0;
    std::array<double, 4> wins{};
    for (std::size_t g = 0; g < groups; ++g) {
      const FourwayGroup group = make_fourway_group(corpus, g % corpus.samples.size(), rng);
      if (group.hard_fallback) ++r.hard_fallbacks;
      std::array<double, 4> score{};
      for (std::size_t c = 0; c < 4; ++c) {
        const EncoderOutput out =
            encoder_forward(model, compose_pair(corpus, group.image[c], group.caption[c]), opts);
        score[c] = itm_score(model, out).item();
        if (c == group.positive)
          trace.write(0, static_cast<std::int64_t>(g), out.decisions);
      }
      const double best = *std::max_element(score.begin(), score.end());
      const double pos = score[group.positive];
      if (pos == best)
        correct += 1.0 / static_cast<double>(std::count(score.begin(), score.end(), best));
      for (std::size_t c = 0; c < 4; ++c) {
        if (c == group.positive) continue;
        const double w = pos > score[c] ? 1.0 : (pos == score[c] ? 0.5 : 0.0);
        wins[static_cast<std::size_t>(group.kind[c])] += w;
      }
    }
    r.accuracy = correct / static_cast<double>(groups);
    for (std::size_t k = 1; k < 4; ++k) r.win_rate[k] = wins[k] / static_cast<double>(groups);
  } else {
    double mlm = 0.0, mrc = 0.0, itm = 0.0;
    std::size_t mrc_count = 0;
    const std::size_t n = corpus.samples.size();
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t anchor = g % n;
      const MultimodalSample input = corpus.samples[anchor].to_input();
      TextMasking tm = mask_text_tokens(input, config.text_mask_rate, config.model.vocab, rng);
      RegionMasking rm =
          mask_regions(tm.corrupted, config.region_mask_rate, config.model.num_classes, rng);
      const EncoderOutput out = encoder_forward(model, rm.corrupted, opts);
      trace.write(0, static_cast<std::int64_t>(g), out.decisions);
      mlm += mlm_loss(gather_states(out.x_t, tm.positions), tm.targets, model.heads()).item();
      if (!rm.positions.empty()) {
        mrc += mrc_kl_loss(gather_states(out.x_i, rm.positions), rm.targets, model.heads()).item();
        ++mrc_count;
      }
      const bool positive = rng.bernoulli(0.5);
      std::size_t caption = anchor;
      if (!positive) {
        do {
          caption = rng.below(n);
        } while (caption == anchor ||
                 corpus.samples[caption].tokens == corpus.samples[anchor].tokens);
      }
      const double s =
          itm_score(model, encoder_forward(model, compose_pair(corpus, anchor, caption), opts))
              .item();
      // A zero score sits on the boundary; count it as half right.
      itm += s == 0.0 ? 0.5 : ((s > 0.0) == positive ? 1.0 : 0.0);
    }
    r.mlm_loss = mlm / static_cast<double>(groups);
    r.mrc_kl = mrc_count ? mrc / static_cast<double>(mrc_count) : 0.0;
    r.itm_accuracy = itm / static_cast<double>(groups);
  }
  trace.flush();
  r.trace_records = trace.records();
  return r;
}

TrainConfig gradcheck_config() {
  TrainConfig c;
  c.task = Task::Pretrain;
  c.model.layers = 2;
  c.model.dim = 16;
  c.model.heads = 2;
  c.model.ffn_dim = 32;
  c.model.vocab = 64;
  c.model.feature_dim = 8;
  c.model.num_classes = 4;
  c.model.max_visual = 4;
  c.model.max_text = 10;
  c.model.dtype = DType::F64;
  c.data.max_objects = 3;
  c.corpus_size = 8;
  c.batch = 2;
  c.steps = 0;
  c.log_every = 0;
  c.validate();
  return c;
}

Tensor gradcheck_objective(const SwitchBertModel& model, const TrainConfig& config,
                           const GradcheckOptions& options) {
  const Corpus corpus = gen_corpus(std::max<std::size_t>(options.samples + 1, 4), config.data,
                                   derive_seed(config.seed, kCorpusStream));
  Rng data_rng(derive_seed(config.seed, 0x67c, kDataStream));
  Rng noise_rng(derive_seed(config.seed, 0x67c, kNoiseStream));
  ForwardOptions opts;
  opts.mode = RouteMode::Train;
  opts.tau = options.tau;
  opts.noise = &noise_rng;

  Tensor total;
  auto accumulate = [&](const Tensor& t) { total = total.defined() ? add(total, t) : t; };
  for (std::size_t s = 0; s < options.samples; ++s) {
    const MultimodalSample input = corpus.samples[s].to_input();
    TextMasking tm = mask_text_tokens(input, config.text_mask_rate, config.model.vocab, data_rng);
    RegionMasking rm = mask_regions(tm.corrupted, config.region_mask_rate,
                                    config.model.num_classes, data_rng, true);
    const EncoderOutput out = encoder_forward(model, rm.corrupted, opts);
    accumulate(mlm_loss(gather_states(out.x_t, tm.positions), tm.targets, model.heads()));
    accumulate(mrc_kl_loss(gather_states(out.x_i, rm.positions), rm.targets, model.heads()));
    const bool positive = s % 2 == 0;
    const std::size_t caption = positive ? s : s + 1;
    const EncoderOutput pair = encoder_forward(model, compose_pair(corpus, s, caption), opts);
    accumulate(itm_pair_loss(itm_score(model, pair), positive));
  }
  return total;
}

GradcheckReport run_gradcheck(const TrainConfig& config, const GradcheckOptions& options) {
  const auto started = std::chrono::steady_clock::now();
  SwitchBertModel model(config.model, config.seed);
  Rng jitter(derive_seed(config.seed, 0x717));
  for (auto& e : model.params())
    for (std::size_t i = 0; i < e.tensor.numel(); ++i)
      e.tensor.set(i, e.tensor.at(i) + options.param_jitter * jitter.normal());

  model.params().zero_grad();
  Tensor loss = gradcheck_objective(model, config, options);
  loss.backward();

  GradcheckReport r;
  r.loss = loss.item();
  r.parameters = model.params().total_elements();
  const ScalarObjective f = [&](const ParamStore&) {
    NoGradGuard no_grad;
    return gradcheck_objective(model, config, options).item();
  };
  const auto estimates = finite_diff_grad(f, model.params(), options.step);
  r.comparison = compare_gradients(model.params(), estimates, options.floor);
  r.passed = r.comparison.max_rel_err < options.threshold;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return r;
}

}  // namespace switchbert
