#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "switchbert/config.hpp"
#include "switchbert/encoder.hpp"
#include "switchbert/gradcheck.hpp"
#include "switchbert/optim.hpp"
#include "switchbert/synth.hpp"

namespace switchbert {

enum class Task : std::uint8_t { Pretrain = 0, Fourway = 1 };
const char* to_string(Task task) noexcept;
Task parse_task(const std::string& text);

struct TrainConfig {
  Task task = Task::Fourway;
  EncoderConfig model;
  SynthConfig data;
  std::uint64_t seed = 0;
  std::size_t steps = 2500;
  std::size_t batch = 8;
  AdamConfig adam;
  double tau0 = 5.0;
  double tau_min = 0.5;
  double decay = 0.999;
  std::size_t corpus_size = 20000;   // generated training corpus
  std::size_t eval_groups = 2000;
  std::size_t eval_corpus_size = 2000;
  std::uint64_t eval_seed = 7331;
  double text_mask_rate = 0.15;
  double region_mask_rate = 0.15;
  std::string corpus;  // optional training corpus file
  std::string ckpt;    // output checkpoint
  std::string init;    // optional checkpoint to start from (parameters only)
  std::string trace;
  std::string force_route;
  std::size_t log_every = 100;

  /// Copies the shared vocabulary/feature sizes from the model section into
  /// the data section and checks everything.
  void validate();
};

/// Flat JSON object; unknown keys raise ConfigError. Keys mirror the CLI
/// flags with underscores (tau_min, ffn_dim, mode_space, ...).
void apply_config_json(TrainConfig& config, const std::string& json_text);
std::string config_to_json(const TrainConfig& config);

/// max(tau_min, tau0 · decay^step).
double temperature_schedule(std::size_t step, double tau0, double tau_min, double decay);
inline double temperature_schedule(std::size_t step, const TrainConfig& c) {
  return temperature_schedule(step, c.tau0, c.tau_min, c.decay);
}

struct StepLog {
  std::size_t step = 0;
  double loss = 0.0;
  double tau = 0.0;
  double grad_norm = 0.0;
  double mlm = 0.0;
  double mrc = 0.0;
  double itm = 0.0;
};

struct TrainResult {
  std::size_t steps = 0;
  double final_loss = 0.0;
  double mean_loss_last = 0.0;   // over the last min(100, steps) steps
  double first_mlm = 0.0;
  double final_mlm = 0.0;        // mean MLM over the last min(20, steps) steps
  double seconds = 0.0;
  std::size_t trace_records = 0;
  std::vector<StepLog> history;
  std::array<std::size_t, kNumModes> sab_choices{};  // hard choices of traced decisions
};

/// Builds the model, runs the configured task and writes checkpoint/trace.
/// A non-finite loss aborts with NumericError after saving the parameters of
/// the last good step (when a checkpoint path is set).
TrainResult train(const TrainConfig& config, SwitchBertModel* model_out = nullptr);

/// Trains an existing model in place.
TrainResult train_model(SwitchBertModel& model, const TrainConfig& config);

/// Training / evaluation corpora implied by a config.
Corpus training_corpus(const TrainConfig& config);
Corpus evaluation_corpus(const TrainConfig& config);

struct EvalOptions {
  std::size_t groups = 0;             // 0: config.eval_groups
  std::optional<double> soft_tau;     // soft weighting at this τ with zero noise
  std::string trace;
  std::string corpus;                 // overrides the generated evaluation corpus
  const RouteOverrides* overrides = nullptr;
};

struct EvalResult {
  Task task = Task::Fourway;
  std::size_t groups = 0;
  double accuracy = 0.0;          // ties share credit
  std::array<double, 4> win_rate{};  // positive beats each candidate kind (ties 0.5)
  std::size_t hard_fallbacks = 0;
  double mlm_loss = 0.0;
  double mrc_kl = 0.0;
  double itm_accuracy = 0.0;
  std::size_t trace_records = 0;
};

EvalResult evaluate(const SwitchBertModel& model, const TrainConfig& config,
                    const EvalOptions& options);

/// Saves parameters, optimizer state and metadata ("config", "step", "rng").
void save_training_checkpoint(const SwitchBertModel& model, const TrainConfig& config,
                              const Adam* optimizer, std::size_t step, const std::string& path);
/// Rebuilds a model from a checkpoint and its stored config.
SwitchBertModel load_model(const std::string& path, TrainConfig* config_out = nullptr);

/// Small f64 model used by the gradient check (L=2, d=16).
TrainConfig gradcheck_config();

struct GradcheckOptions {
  double step = 1e-5;
  double floor = 1e-5;      // relative-error denominator floor, above the ε·|f|/h noise
  double threshold = 1e-4;
  std::size_t samples = 2;
  double tau = 1.0;
  double param_jitter = 0.2;  // moves zero-initialised heads off the origin
};

struct GradcheckReport {
  GradComparison comparison;
  double loss = 0.0;
  std::size_t parameters = 0;
  double seconds = 0.0;
  bool passed = false;
};

/// Summed MLM + MRC-KL + ITM loss of a fixed batch under soft routing with
/// fixed Gumbel noise; identical on every call for the same parameters.
Tensor gradcheck_objective(const SwitchBertModel& model, const TrainConfig& config,
                           const GradcheckOptions& options);

/// Backward gradients against central differences for every parameter.
GradcheckReport run_gradcheck(const TrainConfig& config, const GradcheckOptions& options);

}  // namespace switchbert
