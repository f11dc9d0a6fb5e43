#include "cli.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "switchbert/checkpoint.hpp"
#include "switchbert/encoder.hpp"
#include "switchbert/synth.hpp"
#include "switchbert/trace.hpp"
#include "switchbert/trainer.hpp"

namespace switchbert::cli {

using nlohmann::json;

namespace {

// Flags shared by the commands that build a TrainConfig. Unset flags leave
// the file (or default) value alone.
struct ConfigFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps, batch, layers, dim, heads, topk, max_objects, log_every;
  std::optional<std::size_t> corpus_size;
  std::optional<double> tau0, tau_min, decay, lr, init_std;
  std::optional<std::string> dtype, corpus, ckpt, trace, force_route, mode_space, readout, init;

  void attach(CLI::App& app) {
    app.add_option("--config", config, "JSON config file");
    app.add_option("--seed", seed, "Seed for the model, data and routing noise");
    app.add_option("--steps", steps, "Optimizer steps");
    app.add_option("--batch", batch, "Samples (or 4-way groups) per step");
    app.add_option("--layers", layers, "Encoder layers L");
    app.add_option("--dim", dim, "Hidden size d");
    app.add_option("--heads", heads, "Attention heads");
    app.add_option("--tau0", tau0, "Initial Gumbel-softmax temperature");
    app.add_option("--tau-min", tau_min, "Temperature floor");
    app.add_option("--decay", decay, "Per-step temperature decay");
    app.add_option("--topk", topk, "Routes kept per switcher during training")
        ->check(CLI::Range(1, 4));
    app.add_option("--dtype", dtype, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    app.add_option("--corpus", corpus, "Corpus JSONL file");
    app.add_option("--ckpt", ckpt, "Checkpoint path");
    app.add_option("--trace", trace, "Route trace JSONL output");
    app.add_option("--force-route", force_route, "Pin switchers, e.g. \"SAB:1=M3,SIB:2=0\"");
    app.add_option("--mode-space", mode_space, "Allowed SAB modes: all, joint, cross, M0,M1,...");
    app.add_option("--readout", readout, "Matching readout: cls or fused");
    app.add_option("--lr", lr, "Learning rate");
    app.add_option("--init-std", init_std, "Weight init standard deviation");
    app.add_option("--max-objects", max_objects, "Objects per synthetic scene");
    app.add_option("--corpus-size", corpus_size, "Generated training corpus size");
    app.add_option("--init", init, "Start from the parameters of this checkpoint");
    app.add_option("--log-every", log_every, "Log interval in steps (0 silences)");
  }

  TrainConfig build(TrainConfig c) const {
    if (!config.empty()) {
      std::ifstream in(config);
      if (!in) throw ConfigError("cannot read config file '" + config + "'");
      std::stringstream text;
      text << in.rdbuf();
      apply_config_json(c, text.str());
    }
    if (seed) c.seed = *seed;
    if (steps) c.steps = *steps;
    if (batch) c.batch = *batch;
    if (layers) c.model.layers = *layers;
    if (dim) c.model.dim = *dim;
    if (heads) c.model.heads = *heads;
    if (topk) c.model.sab_topk = c.model.sib_topk = *topk;
    if (max_objects) c.data.max_objects = *max_objects;
    if (log_every) c.log_every = *log_every;
    if (corpus_size) c.corpus_size = *corpus_size;
    if (tau0) c.tau0 = *tau0;
    if (tau_min) c.tau_min = *tau_min;
    if (decay) c.decay = *decay;
    if (lr) c.adam.lr = *lr;
    if (init_std) c.model.init_std = *init_std;
    if (dtype) c.model.dtype = parse_dtype(*dtype);
    if (corpus) c.corpus = *corpus;
    if (ckpt) c.ckpt = *ckpt;
    if (trace) c.trace = *trace;
    if (force_route) c.force_route = *force_route;
    if (mode_space) c.model.mode_space = parse_mode_space(*mode_space);
    if (readout) c.model.itm_readout = parse_readout(*readout);
    if (init) c.init = *init;
    c.validate();
    return c;
  }
};

json flops_json(const FlopBreakdown& b) {
  return {{"embedding", b.embedding}, {"qkv", b.qkv},       {"scores", b.scores},
          {"values", b.values},       {"output", b.output}, {"ffn", b.ffn},
          {"router", b.router},       {"total", b.total()}};
}

json eval_json(const EvalResult& r) {
  json j;
  j["task"] = to_string(r.task);
  j["groups"] = r.groups;
  if (r.task == Task::Fourway) {
    j["accuracy"] = r.accuracy;
    j["win_vs_random_caption"] = r.win_rate[1];
    j["win_vs_random_image"] = r.win_rate[2];
    j["win_vs_hard_image"] = r.win_rate[3];
    j["hard_fallbacks"] = r.hard_fallbacks;
  } else {
    j["mlm_loss"] = r.mlm_loss;
    j["mlm_perplexity"] = std::exp(r.mlm_loss);
    j["mrc_kl"] = r.mrc_kl;
    j["itm_accuracy"] = r.itm_accuracy;
  }
  j["trace_records"] = r.trace_records;
  return j;
}

json train_json(const char* command, const TrainConfig& c, const TrainResult& r) {
  json j;
  j["command"] = command;
  j["task"] = to_string(c.task);
  j["steps"] = r.steps;
  j["batch"] = c.batch;
  j["seed"] = c.seed;
  j["final_loss"] = r.final_loss;
  j["mean_loss_last"] = r.mean_loss_last;
  if (c.task == Task::Pretrain) {
    j["first_mlm"] = r.first_mlm;
    j["final_mlm"] = r.final_mlm;
  }
  j["final_tau"] = r.history.empty() ? c.tau0 : r.history.back().tau;
  j["sab_mode_counts"] = r.sab_choices;
  j["trace_records"] = r.trace_records;
  j["seconds"] = r.seconds;
  j["ckpt"] = c.ckpt;
  return j;
}

int error_code(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::Config: return kConfig;
    case ErrorKind::Format:
    case ErrorKind::Corruption:
    case ErrorKind::Io: return kFormat;
    case ErrorKind::Numeric: return kNumeric;
    default: return kFailure;
  }
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Switch-BERT style multimodal encoder: data, training, evaluation"};
  app.name("switchbert");
  app.require_subcommand(1, 1);

  ConfigFlags train_flags;

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic corpus as JSONL");
  std::size_t gen_n = 0;
  train_flags.attach(*gen);
  gen->add_option("--count", gen_n, "Samples to generate (default corpus_size)");

  auto* pretrain = app.add_subcommand("pretrain", "MLM + MRC-KL + ITM pretraining");
  train_flags.attach(*pretrain);

  auto* finetune = app.add_subcommand("finetune", "4-way image-text matching");
  bool finetune_eval = false;
  train_flags.attach(*finetune);
  finetune->add_flag("--eval", finetune_eval, "Evaluate on the held-out groups afterwards");

  auto* eval = app.add_subcommand("eval", "Hard-routing evaluation of a checkpoint");
  std::string eval_ckpt, eval_trace, eval_corpus, eval_force;
  std::optional<std::size_t> eval_groups;
  std::optional<double> eval_soft;
  std::optional<std::string> eval_task;
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint to evaluate")->required();
  eval->add_option("--trace", eval_trace, "Route trace JSONL output");
  eval->add_option("--corpus", eval_corpus, "Evaluation corpus JSONL (default: generated)");
  eval->add_option("--force-route", eval_force, "Pin switchers, e.g. \"SAB:*=M0\"");
  eval->add_option("--groups", eval_groups, "Groups (or samples) to evaluate");
  eval->add_option("--soft-tau", eval_soft, "Soft routing at this temperature, zero noise");
  eval->add_option("--task", eval_task, "pretrain or fourway (default: stored task)")
      ->check(CLI::IsMember({"pretrain", "fourway"}));

  auto* arch = app.add_subcommand("extract-arch", "Rank route paths found in a trace");
  std::string arch_trace;
  std::size_t arch_blocks = 0, arch_top = 0;
  arch->add_option("--trace", arch_trace, "Route trace JSONL")->required();
  arch->add_option("--blocks", arch_blocks, "Decisions per complete path (default 2L-1)");
  arch->add_option("--top", arch_top, "Print only the first N paths");

  auto* flops = app.add_subcommand("flops", "Matmul FLOPs of one encoder forward");
  std::optional<std::size_t> n_img, n_txt;
  train_flags.attach(*flops);
  flops->add_option("--n-img", n_img, "Visual sequence length (default max_visual)");
  flops->add_option("--n-txt", n_txt, "Text sequence length (default max_text)");

  auto* grad = app.add_subcommand("gradcheck", "Backward pass against central differences");
  std::optional<std::uint64_t> grad_seed;
  std::optional<std::size_t> grad_layers, grad_dim, grad_heads;
  double grad_step = 1e-5;
  grad->add_option("--seed", grad_seed, "Model seed");
  grad->add_option("--layers", grad_layers, "Encoder layers L");
  grad->add_option("--dim", grad_dim, "Hidden size d");
  grad->add_option("--heads", grad_heads, "Attention heads");
  grad->add_option("--step", grad_step, "Finite-difference step h");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* failed = &app;
    for (const auto* sub : app.get_subcommands()) failed = sub;
    err << failed->help();
    return kUsage;
  }

  try {
    if (*gen) {
      TrainConfig c = train_flags.build(TrainConfig{});
      if (c.corpus.empty()) throw ConfigError("gen-data needs --corpus as the output path");
      const std::size_t n = gen_n ? gen_n : c.corpus_size;
      const Corpus corpus = gen_corpus(n, c.data, c.seed);
      save_corpus(corpus, c.corpus);
      std::size_t fallback = 0;
      Rng rng(derive_seed(c.seed, 0x9e7));
      const std::size_t probe = std::min<std::size_t>(n, 1000);
      if (n >= 4)
        for (std::size_t g = 0; g < probe; ++g)
          fallback += make_fourway_group(corpus, g, rng).hard_fallback ? 1 : 0;
      out << json{{"command", "gen-data"},
                  {"samples", n},
                  {"path", c.corpus},
                  {"seed", c.seed},
                  {"hard_fallback_rate", probe && n >= 4 ? double(fallback) / double(probe) : 0.0}}
                 .dump()
          << '\n';
      return kOk;
    }
    if (*pretrain || *finetune) {
      TrainConfig base;
      base.task = *pretrain ? Task::Pretrain : Task::Fourway;
      TrainConfig c = train_flags.build(base);
      c.task = base.task;
      SwitchBertModel model(c.model, c.seed);
      if (!c.init.empty()) restore_params(model.params(), load_checkpoint(c.init));
      const TrainResult r = train_model(model, c);
      json j = train_json(*pretrain ? "pretrain" : "finetune", c, r);
      if (finetune_eval) j["eval"] = eval_json(evaluate(model, c, EvalOptions{}));
      out << j.dump() << '\n';
      return kOk;
    }
    if (*eval) {
      TrainConfig c;
      SwitchBertModel model = load_model(eval_ckpt, &c);
      if (eval_task) c.task = parse_task(*eval_task);
      RouteOverrides overrides;
      EvalOptions opts;
      if (!eval_force.empty()) {
        overrides = RouteOverrides::parse(eval_force);
        opts.overrides = &overrides;
      }
      if (eval_groups) opts.groups = *eval_groups;
      opts.soft_tau = eval_soft;
      opts.trace = eval_trace;
      opts.corpus = eval_corpus;
      json j = eval_json(evaluate(model, c, opts));
      j["command"] = "eval";
      j["ckpt"] = eval_ckpt;
      j["routing"] = eval_soft ? "soft" : "hard";
      out << j.dump() << '\n';
      return kOk;
    }
    if (*arch) {
      const ArchitectureReport rep = extract_architecture(read_trace(arch_trace), arch_blocks);
      if (rep.skipped) err << "warning: skipped " << rep.skipped << " incomplete paths\n";
      json entries = json::array();
      double total = 0.0;
      for (std::size_t i = 0; i < rep.entries.size(); ++i) {
        total += rep.entries[i].percent;
        if (arch_top && i >= arch_top) continue;
        entries.push_back({{"path", rep.entries[i].path},
                           {"count", rep.entries[i].count},
                           {"percent", rep.entries[i].percent}});
      }
      out << json{{"command", "extract-arch"}, {"samples", rep.samples}, {"skipped", rep.skipped},
                  {"blocks", rep.blocks},      {"distinct", rep.entries.size()},
                  {"percent_total", total},    {"paths", entries}}
                 .dump()
          << '\n';
      return kOk;
    }
    if (*flops) {
      const TrainConfig c = train_flags.build(TrainConfig{});
      const std::size_t ni = n_img.value_or(c.model.max_visual);
      const std::size_t nt = n_txt.value_or(c.model.max_text);
      json j{{"command", "flops"}, {"n_img", ni}, {"n_txt", nt}, {"layers", c.model.layers},
             {"dim", c.model.dim}};
      if (!c.trace.empty()) {
        // Average over the complete per-sample paths of a trace.
        std::map<std::pair<std::int64_t, std::int64_t>, std::vector<RouteDecision>> paths;
        for (auto& r : read_trace(c.trace)) {
          r.decision.mode = RouteMode::Train;
          paths[{r.step, r.sample}].push_back(r.decision);
        }
        double sum = 0.0;
        std::size_t used = 0;
        for (const auto& [key, decisions] : paths) {
          try {
            sum += static_cast<double>(count_flops(c.model, ni, nt, decisions).total());
            ++used;
          } catch (const ContractError&) {
          }
        }
        j["trace"] = c.trace;
        j["samples"] = used;
        j["mean_total"] = used ? sum / static_cast<double>(used) : 0.0;
      } else {
        const std::size_t active = std::min(c.model.sab_topk, c.model.mode_space_size());
        j["topk"] = c.model.sab_topk;
        j["active_modes"] = active;
        j["breakdown"] = flops_json(count_flops(c.model, ni, nt, active));
        j["total"] = count_flops(c.model, ni, nt, active).total();
      }
      out << j.dump() << '\n';
      return kOk;
    }
    if (*grad) {
      TrainConfig c = gradcheck_config();
      if (grad_seed) c.seed = *grad_seed;
      if (grad_layers) c.model.layers = *grad_layers;
      if (grad_dim) c.model.dim = *grad_dim;
      if (grad_heads) c.model.heads = *grad_heads;
      c.validate();
      GradcheckOptions opts;
      opts.step = grad_step;
      const GradcheckReport r = run_gradcheck(c, opts);
      out << json{{"command", "gradcheck"},
                  {"layers", c.model.layers},
                  {"dim", c.model.dim},
                  {"dtype", to_string(c.model.dtype)},
                  {"parameters", r.parameters},
                  {"loss", r.loss},
                  {"max_rel_err", r.comparison.max_rel_err},
                  {"max_abs_err", r.comparison.max_abs_err},
                  {"worst_param", r.comparison.worst_param},
                  {"threshold", opts.threshold},
                  {"passed", r.passed},
                  {"seconds", r.seconds}}
                 .dump()
          << '\n';
      return r.passed ? kOk : kCheckFailed;
    }
  } catch (const Error& e) {
    err << "error (" << to_string(e.kind()) << "): " << e.what() << '\n';
    return error_code(e);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}

}  // namespace switchbert::cli
