#include "prefixq/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "prefixq/errors.hpp"
#include "prefixq/serialize.hpp"

namespace prefixq {

namespace {

constexpr std::string_view kCheckpointMagic{"PQCKPT\0\0", 8};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint64_t kTrainStream = 0x7261696e;
constexpr std::uint64_t kInitStream = 0x696e6974;

std::string fmt(double v, const char* spec = "%.17g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

void TrainConfig::sync_dims() {
  dims.prefix_tokens = task.prefix_tokens;
  dims.model_dim = task.model_dim;
  dims.horizon = task.horizon;
  dims.action_dim = task.action_dim;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidArgument("config: lr must be positive");
  if (!(lr_floor >= 0.0) || lr_floor > lr) throw InvalidArgument("config: lr_floor must lie in [0, lr]");
  if (!(weight_decay >= 0.0)) throw InvalidArgument("config: weight_decay must be nonnegative");
  if (!(grad_clip > 0.0)) throw InvalidArgument("config: grad_clip must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw InvalidArgument("config: Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw InvalidArgument("config: adam_eps must be positive");
  if (total_steps < 1) throw InvalidArgument("config: total_steps must be positive");
  if (warmup_steps < 0 || warmup_steps > total_steps) {
    throw InvalidArgument("config: warmup_steps must lie in [0, total_steps]");
  }
  if (batch_size < 1) throw InvalidArgument("config: batch_size must be positive");
  if (dual_branch && !quantization_enabled) {
    throw InvalidArgument("config: dual_branch requires quantization_enabled");
  }
  if (log_every < 0) throw InvalidArgument("config: log_every must be nonnegative");
  if (sample_steps < 1) throw InvalidArgument("config: sample_steps must be positive");
  if (!(success_tolerance > 0.0) || !(step_tolerance > 0.0)) {
    throw InvalidArgument("config: success tolerances must be positive");
  }
  task.validate();
  dims.validate();
  quant.validate();
  weights.validate();
  if (dims.prefix_tokens != task.prefix_tokens || dims.model_dim != task.model_dim ||
      dims.horizon != task.horizon || dims.action_dim != task.action_dim) {
    throw DimMismatch("config: model dims disagree with the task spec");
  }
}

PolicyConfig TrainConfig::policy() const {
  PolicyConfig p;
  p.dims = dims;
  p.quant = quant;
  p.quantization_enabled = quantization_enabled;
  p.adaptive_ste = adaptive_ste;
  p.raw_branch = raw_branch;
  return p;
}

LossConfig TrainConfig::loss() const {
  LossConfig l;
  l.weights = weights;
  l.dual_branch = dual_branch;
  l.reduction = fm_reduction;
  return l;
}

TrainConfig TrainConfig::preset_named(const std::string& name) {
  TrainConfig cfg;
  cfg.sync_dims();
  if (name == "desk") return cfg;
  if (name == "paper") {
    cfg.preset = "paper";
    cfg.lr = 2.5e-5;
    return cfg;
  }
  throw InvalidArgument("unknown preset '" + name + "' (valid: desk, paper)");
}

double cosine_warmup_lr(int step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.total_steps) {
    throw InvalidArgument("cosine_warmup_lr: step " + std::to_string(step) + " outside [0, total_steps]");
  }
  if (step < cfg.warmup_steps) return cfg.lr * step / cfg.warmup_steps;
  const int span = cfg.total_steps - cfg.warmup_steps;
  if (span == 0) return cfg.lr_floor;
  const double progress = static_cast<double>(step - cfg.warmup_steps) / span;
  return cfg.lr_floor + (cfg.lr - cfg.lr_floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamState AdamState::zeros_like(const ParamSet& params) {
  AdamState s;
  s.m = params.zeros_like();
  s.v = params.zeros_like();
  return s;
}

bool decays(const std::string& name) { return name.size() >= 2 && name.compare(name.size() - 2, 2, ".w") == 0; }

void adamw_update(ParamSet& params, const GradSet& grads, AdamState& state, double lr, const TrainConfig& cfg) {
  if (!grads.same_layout(params) || !state.m.same_layout(params)) {
    throw ShapeMismatch("adamw_update: gradient or moment layout differs from parameters");
  }
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(cfg.adam_beta1, t);
  const double c2 = 1.0 - std::pow(cfg.adam_beta2, t);
  for (const auto& [name, g] : grads) {
    Matrix& m = state.m.mutable_at(name);
    Matrix& v = state.v.mutable_at(name);
    Matrix& p = params.mutable_at(name);
    m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * g;
    v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * g.cwiseProduct(g);
    if (decays(name)) p *= 1.0 - lr * cfg.weight_decay;
    p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.adam_eps);
  }
}

double global_norm(const GradSet& grads) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) sq += g.squaredNorm();
  return std::sqrt(sq);
}

double clip_global_norm(GradSet& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (const std::string& name : grads.names()) grads.mutable_at(name) *= factor;
  }
  return norm;
}

// Checkpoint files ----------------------------------------------------------

namespace {

void write_tensors(io::Writer& w, const NamedTensors& t) {
  w.u64(t.size());
  for (const auto& [name, m] : t) {
    w.str(name);
    w.matrix(m);
  }
}

NamedTensors read_tensors(io::Reader& r) {
  const std::uint64_t n = r.u64();
  NamedTensors t;
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = r.str();
    Matrix m = r.matrix();
    t.add(name, std::move(m));
  }
  return t;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  io::Writer w(kCheckpointMagic, kCheckpointVersion);
  w.str(config_to_json_text(ckpt.config));
  write_tensors(w, ckpt.params);
  write_tensors(w, ckpt.adam.m);
  write_tensors(w, ckpt.adam.v);
  w.u64(ckpt.adam.t);
  w.row(ckpt.stats.lower);
  w.row(ckpt.stats.upper);
  w.u64(ckpt.step);
  w.str(ckpt.rng_state);
  w.save(path);
}

Checkpoint load_checkpoint(const std::string& path) {
  io::Reader r = io::Reader::open(path, kCheckpointMagic, kCheckpointVersion, "checkpoint");
  Checkpoint c;
  c.config = config_from_json_text(r.str());
  c.params = read_tensors(r);
  c.adam.m = read_tensors(r);
  c.adam.v = read_tensors(r);
  c.adam.t = r.u64();
  c.stats.lower = r.row();
  c.stats.upper = r.row();
  c.step = r.u64();
  c.rng_state = r.str();
  r.expect_end();

  const ParamSet expected = init_params(0, c.config.dims).merged();
  if (!c.params.same_layout(expected)) {
    throw DimMismatch("checkpoint " + path + ": parameter shapes do not match the stored model dims");
  }
  if (!c.adam.m.same_layout(expected) || !c.adam.v.same_layout(expected)) {
    throw DimMismatch("checkpoint " + path + ": optimizer state does not match the parameters");
  }
  if (c.stats.dims() != c.config.dims.action_dim) {
    throw DimMismatch("checkpoint " + path + ": normalization stats do not match the action dimension");
  }
  return c;
}

// Metrics -------------------------------------------------------------------

std::string metrics_csv_header() {
  return "step,loss,flow_loss,tc_loss,gate,lr,grad_norm,grad_norm_clipped,success_train,success_shift";
}

std::string metrics_csv_line(const MetricsRow& r) {
  std::string s = std::to_string(r.step);
  for (double v : {r.loss, r.flow_loss, r.tc_loss, r.gate, r.lr, r.grad_norm, r.grad_norm_clipped, r.success_train,
                   r.success_shift}) {
    s += ',';
    s += fmt(v);
  }
  return s;
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write metrics file " + path);
  out << "# prefixq-metrics v1\n" << metrics_csv_header() << '\n';
  for (const MetricsRow& r : rows) out << metrics_csv_line(r) << '\n';
  if (!out) throw IoError("failed writing metrics file " + path);
}

// Evaluation ----------------------------------------------------------------

Shift Shift::parse(const std::string& text) {
  if (text == "clean") return {ShiftKind::kClean, 0.0};
  if (text == "held-out") return {ShiftKind::kHeldOut, 0.0};
  const std::string tag = "gaussian:";
  if (text.rfind(tag, 0) == 0) {
    std::size_t used = 0;
    double sigma = 0.0;
    try {
      sigma = std::stod(text.substr(tag.size()), &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != text.size() - tag.size() || !(sigma >= 0.0)) {
      throw InvalidArgument("bad gaussian shift '" + text + "'");
    }
    return {ShiftKind::kGaussian, sigma};
  }
  throw InvalidArgument("unknown shift '" + text + "' (valid: clean, held-out, gaussian:<sigma>)");
}

std::string Shift::label() const {
  switch (kind) {
    case ShiftKind::kClean:
      return "clean";
    case ShiftKind::kHeldOut:
      return "held-out";
    case ShiftKind::kGaussian:
      return "gaussian:" + fmt(sigma, "%g");
  }
  return "";
}

namespace {

void check_episode_dims(const synth::Episode& e, const ModelDims& dims) {
  if (e.prefix.rows() != dims.prefix_tokens || e.prefix.cols() != dims.model_dim) {
    throw DimMismatch("episode prefix is " + to_string(shape_of(e.prefix)) + ", model expects " +
                      std::to_string(dims.prefix_tokens) + "x" + std::to_string(dims.model_dim));
  }
  if (e.expert.rows() != dims.horizon || e.expert.cols() != dims.action_dim) {
    throw DimMismatch("episode actions are " + to_string(shape_of(e.expert)) + ", model expects " +
                      std::to_string(dims.horizon) + "x" + std::to_string(dims.action_dim));
  }
}

}  // namespace

EvalMetrics evaluate_episodes(const Checkpoint& ckpt, const std::vector<synth::Episode>& episodes, double sigma) {
  const TrainConfig& cfg = ckpt.config;
  const PolicyConfig policy = cfg.policy();
  if (ckpt.stats.dims() != cfg.dims.action_dim) throw DimMismatch("normalization stats do not match the model");
  EvalMetrics out;
  out.episodes = episodes.size();
  if (episodes.empty()) return out;

  std::size_t successes = 0;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const synth::Episode& e = episodes[i];
    check_episode_dims(e, cfg.dims);
    const PrefixLatent observed = synth::noisy_copy(e.prefix, sigma, derive_seed(cfg.eval_seed, 2 * i + 1));
    const PrefixLatent cond = prefix_block_forward(observed, ckpt.params, policy, cfg.quantization_enabled);
    const ActionChunk sample =
        sample_actions(cond, ckpt.params, cfg.dims, cfg.sample_steps, derive_seed(cfg.eval_seed, 2 * i));
    const Matrix diff = normalize_actions(sample, ckpt.stats) - normalize_actions(e.expert, ckpt.stats);
    const Eigen::VectorXd step_err = diff.rowwise().norm();
    const double endpoint = step_err(step_err.size() - 1);
    const double mean_step = step_err.mean();
    out.endpoint_error += endpoint;
    out.mean_error += mean_step;
    if (endpoint <= cfg.success_tolerance && mean_step <= cfg.step_tolerance) ++successes;
  }
  const auto n = static_cast<double>(episodes.size());
  out.success_rate = static_cast<double>(successes) / n;
  out.mean_error /= n;
  out.endpoint_error /= n;
  return out;
}

EvalMetrics evaluate(const Checkpoint& ckpt, const synth::Dataset& data, const Shift& shift) {
  switch (shift.kind) {
    case ShiftKind::kClean:
      return evaluate_episodes(ckpt, data.train, 0.0);
    case ShiftKind::kHeldOut:
      return evaluate_episodes(ckpt, data.test, 0.0);
    case ShiftKind::kGaussian:
      return evaluate_episodes(ckpt, data.train, shift.sigma);
  }
  throw InvalidArgument("unknown shift kind");
}

double fixed_flow_loss(const ParamSet& params, const TrainConfig& cfg, const std::vector<synth::Episode>& episodes,
                       int n_draws, std::uint64_t seed) {
  if (episodes.empty() || n_draws < 1) throw InvalidArgument("fixed_flow_loss: need episodes and draws");
  const PolicyConfig policy = cfg.policy();
  LossConfig loss = cfg.loss();
  loss.dual_branch = false;
  const NormStats unused = NormStats::identity(cfg.dims.action_dim);
  Rng rng(seed);
  double total = 0.0;
  for (int k = 0; k < n_draws; ++k) {
    const synth::Episode& e = episodes[static_cast<std::size_t>(k) % episodes.size()];
    const double tau = rng.uniform();
    const Matrix eps = random_normal(cfg.dims.horizon, cfg.dims.action_dim, rng);
    const FlowSample s = make_flow_sample(e.expert, eps, tau);
    diff::Tape tape;
    diff::VarMap vars;
    for (const auto& [name, value] : params) vars.emplace(name, tape.constant(value));
    total += dual_branch_loss(tape, vars, e.prefix, s, policy, loss, unused).flow.value()(0, 0);
  }
  return total / n_draws;
}

// Training ------------------------------------------------------------------

Checkpoint initial_checkpoint(const TrainConfig& cfg, const synth::Dataset& data) {
  cfg.validate();
  if (data.train.empty()) throw InvalidArgument("training needs at least one train episode");
  for (const synth::Episode& e : data.train) check_episode_dims(e, cfg.dims);
  Checkpoint c;
  c.config = cfg;
  c.params = init_params(derive_seed(cfg.seed, kInitStream), cfg.dims).merged();
  c.adam = AdamState::zeros_like(c.params);
  c.stats = data.stats;
  c.step = 0;
  c.rng_state = Rng(derive_seed(cfg.seed, kTrainStream)).state();
  return c;
}

MetricsRow train_step(Checkpoint& ckpt, const synth::Dataset& data, Rng& rng) {
  const TrainConfig& cfg = ckpt.config;
  const PolicyConfig policy = cfg.policy();
  const LossConfig loss = cfg.loss();
  const int B = cfg.batch_size;

  std::vector<const synth::Episode*> episodes;
  std::vector<FlowSample> samples;
  for (int b = 0; b < B; ++b) {
    const synth::Episode& e = data.train[rng.index(data.train.size())];
    const double tau = rng.uniform();
    const Matrix eps = random_normal(cfg.dims.horizon, cfg.dims.action_dim, rng);
    episodes.push_back(&e);
    samples.push_back(make_flow_sample(e.expert, eps, tau));
  }

  // All batch elements share one tape so parameters are registered once.
  MetricsRow row;
  row.step = static_cast<int>(ckpt.step);
  auto fn = [&](diff::Tape& tape, const diff::VarMap& vars) {
    diff::Var total;
    for (int b = 0; b < B; ++b) {
      const LossTerms t = dual_branch_loss(tape, vars, episodes[b]->prefix, samples[b], policy, loss, ckpt.stats);
      row.flow_loss += t.flow.value()(0, 0);
      row.tc_loss += t.tc.value()(0, 0);
      total = b == 0 ? t.total : diff::add(total, t.total);
    }
    return diff::scale(total, 1.0 / B);
  };
  diff::ValueAndGrad vg = diff::value_and_grad(fn, ckpt.params);
  if (!std::isfinite(vg.value)) throw NonFinite("loss is non-finite at step " + std::to_string(ckpt.step));
  GradSet& grads = vg.grad;
  row.loss = vg.value;
  row.flow_loss /= B;
  row.tc_loss /= B;

  row.grad_norm = clip_global_norm(grads, cfg.grad_clip);
  if (!std::isfinite(row.grad_norm)) throw NonFinite("gradient norm is non-finite at step " + std::to_string(ckpt.step));
  row.grad_norm_clipped = global_norm(grads);
  row.lr = cosine_warmup_lr(row.step, cfg);
  adamw_update(ckpt.params, grads, ckpt.adam, row.lr, cfg);
  ++ckpt.step;
  row.gate = mean_gate(ckpt.params, policy);
  return row;
}

TrainResult train(const TrainConfig& cfg, const synth::Dataset& data, const TrainOptions& options) {
  TrainResult result;
  Checkpoint& ckpt = result.checkpoint;
  if (options.resume) {
    cfg.validate();
    ckpt = *options.resume;
    if (!(ckpt.config.dims == cfg.dims)) throw DimMismatch("resume: checkpoint dims differ from the config");
    ckpt.config = cfg;
    if (ckpt.step > static_cast<std::uint64_t>(cfg.total_steps)) {
      throw InvalidArgument("resume: checkpoint is past total_steps");
    }
    for (const synth::Episode& e : data.train) check_episode_dims(e, cfg.dims);
  } else {
    ckpt = initial_checkpoint(cfg, data);
  }
  Rng rng;
  rng.set_state(ckpt.rng_state);

  while (ckpt.step < static_cast<std::uint64_t>(cfg.total_steps)) {
    const int step = static_cast<int>(ckpt.step);
    MetricsRow row;
    try {
      row = train_step(ckpt, data, rng);
    } catch (const NonFinite& err) {
      if (!options.diagnostic_path.empty()) {
        ckpt.rng_state = rng.state();
        save_checkpoint(ckpt, options.diagnostic_path);
      }
      throw NonFinite(std::string(err.what()) +
                      (options.diagnostic_path.empty() ? "" : "; diagnostic checkpoint at " + options.diagnostic_path));
    }
    const bool last = step + 1 == cfg.total_steps;
    const bool log = last || (cfg.log_every > 0 && step % cfg.log_every == 0);
    if (!log) continue;
    if (cfg.eval_in_metrics) {
      row.success_train = evaluate(ckpt, data, {ShiftKind::kClean, 0.0}).success_rate;
      row.success_shift = evaluate(ckpt, data, {ShiftKind::kHeldOut, 0.0}).success_rate;
    }
    result.metrics.push_back(row);
    if (options.on_metrics) options.on_metrics(row);
  }
  ckpt.rng_state = rng.state();
  return result;
}

// Ablation ------------------------------------------------------------------

const std::vector<std::string>& ablation_knobs() {
  static const std::vector<std::string> knobs = {"L_q",         "b_q",       "adaptive_ste", "dual_branch",
                                                 "constraints", "lambda_tc", "quantization"};
  return knobs;
}

std::vector<std::string> default_knob_values(const std::string& knob) {
  if (knob == "L_q") return {"1", "2", "6"};
  if (knob == "b_q") return {"4", "8", "16"};
  if (knob == "lambda_tc") {
    std::vector<std::string> v;
    for (int i = 0; i <= 10; ++i) v.push_back(fmt(i / 10.0, "%.1f"));
    return v;
  }
  if (knob == "adaptive_ste" || knob == "dual_branch" || knob == "constraints" || knob == "quantization") {
    return {"on", "off"};
  }
  apply_knob(TrainConfig{}, knob, "");  // throws with the list of valid knobs
  return {};
}

namespace {

bool parse_switch(const std::string& knob, const std::string& value) {
  if (value == "on" || value == "true" || value == "1") return true;
  if (value == "off" || value == "false" || value == "0") return false;
  throw InvalidArgument("knob " + knob + ": expected on/off, got '" + value + "'");
}

int parse_int(const std::string& knob, const std::string& value) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != value.size()) throw InvalidArgument("knob " + knob + ": expected an integer, got '" + value + "'");
  return v;
}

double parse_real(const std::string& knob, const std::string& value) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != value.size()) throw InvalidArgument("knob " + knob + ": expected a number, got '" + value + "'");
  return v;
}

}  // namespace

TrainConfig apply_knob(const TrainConfig& base, const std::string& knob, const std::string& value) {
  TrainConfig cfg = base;
  if (knob == "L_q") {
    cfg.dims.depth = parse_int(knob, value);
  } else if (knob == "b_q") {
    cfg.quant.bits = parse_int(knob, value);
  } else if (knob == "adaptive_ste") {
    cfg.adaptive_ste = parse_switch(knob, value);
  } else if (knob == "dual_branch") {
    cfg.dual_branch = parse_switch(knob, value);
  } else if (knob == "constraints") {
    if (!parse_switch(knob, value)) cfg.weights.lambda_tc = 0.0;
  } else if (knob == "lambda_tc") {
    cfg.weights.lambda_tc = parse_real(knob, value);
  } else if (knob == "quantization") {
    cfg.quantization_enabled = parse_switch(knob, value);
    if (!cfg.quantization_enabled) cfg.dual_branch = false;
  } else {
    std::string valid;
    for (const std::string& k : ablation_knobs()) valid += (valid.empty() ? "" : ", ") + k;
    throw InvalidArgument("unknown ablation knob '" + knob + "' (valid: " + valid + ")");
  }
  return cfg;
}

AblationTable ablate(const TrainConfig& base, const synth::Dataset& data, const std::string& knob,
                     const std::vector<std::string>& values, const std::function<void(const AblationRow&)>& on_row) {
  AblationTable table;
  table.knob = knob;
  std::vector<TrainConfig> configs;
  for (const std::string& v : values) {
    configs.push_back(apply_knob(base, knob, v));
    configs.back().validate();
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainConfig cfg = configs[i];
    cfg.eval_in_metrics = false;
    const TrainResult run = train(cfg, data);
    AblationRow row;
    row.value = values[i];
    row.flow_loss = run.metrics.back().flow_loss;
    row.tc_loss = run.metrics.back().tc_loss;
    row.gate = run.metrics.back().gate;
    row.clean = evaluate(run.checkpoint, data, {ShiftKind::kClean, 0.0});
    row.held_out = evaluate(run.checkpoint, data, {ShiftKind::kHeldOut, 0.0});
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    table.rows.push_back(row);
    if (on_row) on_row(row);
  }
  return table;
}

std::string ablation_csv(const AblationTable& table) {
  std::ostringstream os;
  os << "knob,value,flow_loss,tc_loss,gate,success_clean,success_held_out,error_clean,error_held_out,seconds\n";
  for (const AblationRow& r : table.rows) {
    os << table.knob << ',' << r.value << ',' << fmt(r.flow_loss) << ',' << fmt(r.tc_loss) << ',' << fmt(r.gate)
       << ',' << fmt(r.clean.success_rate) << ',' << fmt(r.held_out.success_rate) << ',' << fmt(r.clean.mean_error)
       << ',' << fmt(r.held_out.mean_error) << ',' << fmt(r.seconds, "%.3f") << '\n';
  }
  return os.str();
}

std::string ablation_markdown(const AblationTable& table) {
  std::ostringstream os;
  os << "| " << table.knob << " | L_q (flow) | L_tc | gate | success clean | success held-out | error held-out | s |\n";
  os << "|---|---|---|---|---|---|---|---|\n";
  for (const AblationRow& r : table.rows) {
    os << "| " << r.value << " | " << fmt(r.flow_loss, "%.4f") << " | " << fmt(r.tc_loss, "%.4f") << " | "
       << fmt(r.gate, "%.3f") << " | " << fmt(r.clean.success_rate, "%.3f") << " | "
       << fmt(r.held_out.success_rate, "%.3f") << " | " << fmt(r.held_out.mean_error, "%.4f") << " | "
       << fmt(r.seconds, "%.1f") << " |\n";
  }
  return os.str();
}

}  // namespace prefixq
