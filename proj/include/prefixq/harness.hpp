#pragma once

// Training loop, evaluation under nuisance shift, ablation sweeps and
// checkpoints.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "prefixq/objective.hpp"
#include "prefixq/synthtask.hpp"

namespace prefixq {

struct TrainConfig {
  std::string preset = "desk";
  double lr = 1e-3;  // peak
  double lr_floor = 0.0;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int warmup_steps = 100;
  int total_steps = 2000;
  int batch_size = 64;
  std::uint64_t seed = 0;

  // M, d, T, D are taken from `task`; see sync_dims().
  ModelDims dims;
  QuantConfig quant;
  TCWeights weights;
  bool quantization_enabled = true;
  bool dual_branch = true;
  bool adaptive_ste = true;
  FmReduction fm_reduction = FmReduction::kSum;
  RawBranch raw_branch = RawBranch::kBypassBlock;

  synth::TaskSpec task;

  int log_every = 50;           // metrics cadence; 0 logs only the last step
  bool eval_in_metrics = true;  // success columns evaluated at each log row
  int sample_steps = 10;        // Euler steps at evaluation
  double success_tolerance = 0.1;  // rho, endpoint error (normalized units)
  double step_tolerance = 0.2;     // mean per-step error (normalized units)
  std::uint64_t eval_seed = 1;

  // Copies M, d, T, D from the task spec into dims.
  void sync_dims();
  void validate() const;
  PolicyConfig policy() const;
  LossConfig loss() const;

  static TrainConfig preset_named(const std::string& name);
};

// JSON config text. Sections: train, model, quant, objective, task, eval.
std::string config_to_json_text(const TrainConfig& cfg);
TrainConfig config_from_json_text(const std::string& text);
TrainConfig read_config(const std::string& path);
void write_config(const TrainConfig& cfg, const std::string& path);
// Each override is "section.key=value"; value is parsed as JSON when
// possible and taken as a string otherwise.
TrainConfig apply_overrides(const TrainConfig& cfg, const std::vector<std::string>& overrides);

// Linear ramp 0 → peak over warmup, half-cosine peak → floor afterwards.
double cosine_warmup_lr(int step, const TrainConfig& cfg);

struct AdamState {
  GradSet m;
  GradSet v;
  std::uint64_t t = 0;

  static AdamState zeros_like(const ParamSet& params);
};

// Weight decay applies to names ending in ".w" only.
bool decays(const std::string& name);

// Decoupled weight decay + bias-corrected moments, in place.
void adamw_update(ParamSet& params, const GradSet& grads, AdamState& state, double lr, const TrainConfig& cfg);

double global_norm(const GradSet& grads);
// Rescales in place when the norm exceeds max_norm; returns the pre-clip norm.
double clip_global_norm(GradSet& grads, double max_norm);

struct Checkpoint {
  TrainConfig config;
  ParamSet params;
  AdamState adam;
  NormStats stats;
  std::uint64_t step = 0;
  std::string rng_state;
};

// Binary container: magic "PQCKPT\0\0", u32 version, config JSON, params,
// optimizer moments, NormStats, step, RNG state, FNV-1a 64 checksum.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
// Throws DimMismatch when stored parameter shapes disagree with the stored
// dims.
Checkpoint load_checkpoint(const std::string& path);

struct MetricsRow {
  int step = 0;
  double loss = 0.0;
  double flow_loss = 0.0;  // L_q
  double tc_loss = 0.0;    // hinge
  double gate = 1.0;
  double lr = 0.0;
  double grad_norm = 0.0;          // before clipping
  double grad_norm_clipped = 0.0;  // after clipping
  double success_train = 0.0;
  double success_shift = 0.0;      // held-out nuisance split
};

std::string metrics_csv_header();
std::string metrics_csv_line(const MetricsRow& row);
void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path);

enum class ShiftKind { kClean, kHeldOut, kGaussian };

struct Shift {
  ShiftKind kind = ShiftKind::kClean;
  double sigma = 0.0;

  // "clean", "held-out", "gaussian:<sigma>"
  static Shift parse(const std::string& text);
  std::string label() const;
};

struct EvalMetrics {
  double success_rate = 0.0;
  double mean_error = 0.0;      // mean per-step error, averaged over episodes
  double endpoint_error = 0.0;  // averaged over episodes
  std::size_t episodes = 0;
};

// Clean and Gaussian shifts use the train episodes, held-out uses the test
// episodes. Throws DimMismatch when the dataset does not fit the model.
EvalMetrics evaluate(const Checkpoint& ckpt, const synth::Dataset& data, const Shift& shift);
EvalMetrics evaluate_episodes(const Checkpoint& ckpt, const std::vector<synth::Episode>& episodes, double sigma);

// Flow loss (batch mean of L_q) at fixed draws; comparable across parameter
// values.
double fixed_flow_loss(const ParamSet& params, const TrainConfig& cfg, const std::vector<synth::Episode>& episodes,
                       int n_draws, std::uint64_t seed);

struct TrainOptions {
  std::function<void(const MetricsRow&)> on_metrics;
  // Written when a non-finite loss aborts the run.
  std::string diagnostic_path;
  const Checkpoint* resume = nullptr;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<MetricsRow> metrics;
};

// Fresh parameters and optimizer state for a config, stats from the data.
Checkpoint initial_checkpoint(const TrainConfig& cfg, const synth::Dataset& data);

TrainResult train(const TrainConfig& cfg, const synth::Dataset& data, const TrainOptions& options = {});

// One optimizer step on a fixed batch; exposed for tests. Returns the row
// that train() would log for it.
MetricsRow train_step(Checkpoint& ckpt, const synth::Dataset& data, Rng& rng);

struct AblationRow {
  std::string value;
  double flow_loss = 0.0;
  double tc_loss = 0.0;
  double gate = 1.0;
  EvalMetrics clean;
  EvalMetrics held_out;
  double seconds = 0.0;
};

struct AblationTable {
  std::string knob;
  std::vector<AblationRow> rows;
};

const std::vector<std::string>& ablation_knobs();
std::vector<std::string> default_knob_values(const std::string& knob);
// Throws InvalidArgument listing the valid knobs for an unknown one.
TrainConfig apply_knob(const TrainConfig& base, const std::string& knob, const std::string& value);

AblationTable ablate(const TrainConfig& base, const synth::Dataset& data, const std::string& knob,
                     const std::vector<std::string>& values,
                     const std::function<void(const AblationRow&)>& on_row = {});

std::string ablation_csv(const AblationTable& table);
std::string ablation_markdown(const AblationTable& table);

}  // namespace prefixq
