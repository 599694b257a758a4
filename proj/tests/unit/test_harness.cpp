#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "prefixq/errors.hpp"
#include "prefixq/harness.hpp"

namespace prefixq {
namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.task.n_tasks = 3;
  c.task.n_nuisances = 4;
  c.task.prefix_tokens = 4;
  c.task.model_dim = 8;
  c.task.horizon = 4;
  c.task.task_rows = 2;
  c.dims.n_heads = 2;
  c.dims.ff_dim = 16;
  c.dims.expert_hidden = 16;
  c.dims.cond_dim = 8;
  c.dims.tau_frequencies = 3;
  c.batch_size = 4;
  c.total_steps = 12;
  c.warmup_steps = 3;
  c.log_every = 4;
  c.sample_steps = 4;
  c.sync_dims();
  return c;
}

std::string temp_path(const std::string& name) { return (std::filesystem::temp_directory_path() / name).string(); }

void expect_rows_equal(const MetricsRow& a, const MetricsRow& b) {
  EXPECT_EQ(metrics_csv_line(a), metrics_csv_line(b));
}

TEST(Schedule, WarmupPeakAndFloor) {
  TrainConfig c;
  c.lr = 1e-3;
  c.lr_floor = 1e-5;
  c.warmup_steps = 100;
  c.total_steps = 1100;
  EXPECT_EQ(cosine_warmup_lr(0, c), 0.0);
  EXPECT_DOUBLE_EQ(cosine_warmup_lr(50, c), 5e-4);
  EXPECT_DOUBLE_EQ(cosine_warmup_lr(100, c), 1e-3);
  EXPECT_DOUBLE_EQ(cosine_warmup_lr(600, c), 0.5 * (1e-3 + 1e-5));
  EXPECT_NEAR(cosine_warmup_lr(1100, c), 1e-5, 1e-18);
  double prev = cosine_warmup_lr(100, c);
  for (int s = 101; s <= 1100; ++s) {
    const double lr = cosine_warmup_lr(s, c);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
  EXPECT_THROW(cosine_warmup_lr(-1, c), InvalidArgument);
  EXPECT_THROW(cosine_warmup_lr(1101, c), InvalidArgument);
}

TEST(AdamW, MatchesHandComputation) {
  TrainConfig c;
  c.weight_decay = 0.01;
  ParamSet p;
  p.add("a.w", Matrix::Constant(1, 1, 1.0));
  p.add("a.b", Matrix::Constant(1, 1, 1.0));
  GradSet g;
  g.add("a.w", Matrix::Constant(1, 1, 0.5));
  g.add("a.b", Matrix::Constant(1, 1, 0.5));
  AdamState s = AdamState::zeros_like(p);
  adamw_update(p, g, s, 0.1, c);
  // m = 0.05, v = 0.00025; bias-corrected 0.5 and 0.25.
  const double step = 0.1 * 0.5 / (0.5 + 1e-8);
  EXPECT_DOUBLE_EQ(p.at("a.w")(0, 0), 1.0 * (1.0 - 0.1 * 0.01) - step);
  EXPECT_DOUBLE_EQ(p.at("a.b")(0, 0), 1.0 - step);
  EXPECT_EQ(s.t, 1u);

  adamw_update(p, g, s, 0.1, c);
  const double m2 = 0.9 * 0.05 + 0.1 * 0.5, v2 = 0.999 * 0.00025 + 0.001 * 0.25;
  const double mh = m2 / (1 - 0.81), vh = v2 / (1 - 0.999 * 0.999);
  EXPECT_DOUBLE_EQ(p.at("a.b")(0, 0), 1.0 - step - 0.1 * mh / (std::sqrt(vh) + 1e-8));
}

TEST(AdamW, DecayOnlyOnWeightMatrices) {
  EXPECT_TRUE(decays("block.0.wq.w"));
  EXPECT_TRUE(decays("expert.head.w"));
  EXPECT_FALSE(decays("expert.head.b"));
  EXPECT_FALSE(decays("block.0.ln1.gamma"));
  EXPECT_FALSE(decays("block.0.gate.alpha"));
  for (const auto& [name, _] : init_params(0, ModelDims{}).merged()) {
    const bool is_weight = name.size() > 2 && name.substr(name.size() - 2) == ".w";
    EXPECT_EQ(decays(name), is_weight) << name;
  }
}

TEST(Clip, RescalesAboveThreshold) {
  GradSet g;
  g.add("x", (Matrix(1, 2) << 3.0, 4.0).finished());
  EXPECT_DOUBLE_EQ(global_norm(g), 5.0);
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 1.0), 5.0);
  EXPECT_NEAR(global_norm(g), 1.0, 1e-15);
  EXPECT_NEAR(g.at("x")(0, 1), 0.8, 1e-15);
  GradSet small;
  small.add("x", Matrix::Constant(1, 1, 0.3));
  clip_global_norm(small, 1.0);
  EXPECT_EQ(small.at("x")(0, 0), 0.3);
}

TEST(TrainConfig, ValidationAndPresets) {
  EXPECT_NO_THROW(tiny_config().validate());
  TrainConfig c = tiny_config();
  c.quantization_enabled = false;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c.dual_branch = false;
  EXPECT_NO_THROW(c.validate());
  c = tiny_config();
  c.dims.model_dim = 16;
  EXPECT_THROW(c.validate(), DimMismatch);
  c = tiny_config();
  c.lr = 0.0;
  EXPECT_THROW(c.validate(), InvalidArgument);

  const TrainConfig paper = TrainConfig::preset_named("paper");
  EXPECT_DOUBLE_EQ(paper.lr, 2.5e-5);
  EXPECT_DOUBLE_EQ(paper.weight_decay, 0.01);
  EXPECT_DOUBLE_EQ(paper.grad_clip, 1.0);
  EXPECT_DOUBLE_EQ(TrainConfig::preset_named("desk").lr, 1e-3);
  EXPECT_THROW(TrainConfig::preset_named("huge"), InvalidArgument);
}

TEST(ConfigText, RoundTripAndOverrides) {
  TrainConfig c = tiny_config();
  c.weights.lambda_tc = 0.45;
  c.raw_branch = RawBranch::kBypassQuantizer;
  c.fm_reduction = FmReduction::kMean;
  c.task.seed = 99;
  const std::string text = config_to_json_text(c);
  const TrainConfig back = config_from_json_text(text);
  EXPECT_EQ(config_to_json_text(back), text);
  EXPECT_EQ(back.task, c.task);
  EXPECT_EQ(back.dims, c.dims);

  const TrainConfig o = apply_overrides(c, {"objective.lambda_tc=0.7", "quant.bits=4", "train.batch_size=8",
                                            "objective.raw_branch=bypass_block"});
  EXPECT_DOUBLE_EQ(o.weights.lambda_tc, 0.7);
  EXPECT_EQ(o.quant.bits, 4);
  EXPECT_EQ(o.batch_size, 8);
  EXPECT_EQ(o.raw_branch, RawBranch::kBypassBlock);

  const TrainConfig paper = apply_overrides(c, {"train.preset=paper"});
  EXPECT_DOUBLE_EQ(paper.lr, 2.5e-5);

  EXPECT_THROW(apply_overrides(c, {"train.bogus=1"}), InvalidArgument);
  EXPECT_THROW(apply_overrides(c, {"nosection=1"}), InvalidArgument);
  EXPECT_THROW(apply_overrides(c, {"quant.bits=1"}).validate(), InvalidArgument);
  EXPECT_THROW(apply_overrides(c, {"quant.bits=\"eight\""}), InvalidArgument);
}

TEST(ConfigText, RejectsUnknownKeysAndBadHeaders) {
  std::string text = config_to_json_text(tiny_config());
  const std::string tagged = text;
  text.replace(text.find("\"lambda_tc\""), 11, "\"lambda_xx\"");
  EXPECT_THROW(config_from_json_text(text), InvalidArgument);
  std::string wrong_format = tagged;
  wrong_format.replace(wrong_format.find("prefixq-config"), 14, "something-else");
  EXPECT_THROW(config_from_json_text(wrong_format), CorruptFile);
  EXPECT_THROW(config_from_json_text("{"), CorruptFile);

  const std::string path = temp_path("prefixq_config_test.json");
  write_config(tiny_config(), path);
  EXPECT_EQ(config_to_json_text(read_config(path)), tagged);
  std::filesystem::remove(path);
  EXPECT_THROW(read_config(path), IoError);
}

TEST(Shift, ParseAndLabel) {
  EXPECT_EQ(Shift::parse("clean").kind, ShiftKind::kClean);
  EXPECT_EQ(Shift::parse("held-out").kind, ShiftKind::kHeldOut);
  const Shift g = Shift::parse("gaussian:0.05");
  EXPECT_EQ(g.kind, ShiftKind::kGaussian);
  EXPECT_DOUBLE_EQ(g.sigma, 0.05);
  EXPECT_EQ(Shift::parse(g.label()).sigma, g.sigma);
  EXPECT_THROW(Shift::parse("gaussian:"), InvalidArgument);
  EXPECT_THROW(Shift::parse("gaussian:-1"), InvalidArgument);
  EXPECT_THROW(Shift::parse("gaussian:0.1x"), InvalidArgument);
  EXPECT_THROW(Shift::parse("rotate"), InvalidArgument);
}

TEST(Metrics, CsvFormat) {
  MetricsRow r;
  r.step = 7;
  r.loss = 0.5;
  r.gate = 0.55;
  const std::string header = metrics_csv_header();
  EXPECT_EQ(header.substr(0, 5), "step,");
  const std::string line = metrics_csv_line(r);
  EXPECT_EQ(std::count(line.begin(), line.end(), ','), std::count(header.begin(), header.end(), ','));
  EXPECT_EQ(line.substr(0, 6), "7,0.5,");

  const std::string path = temp_path("prefixq_metrics_test.csv");
  write_metrics_csv({r, r}, path);
  std::ifstream in(path);
  std::string first, second;
  std::getline(in, first);
  std::getline(in, second);
  EXPECT_EQ(first, "# prefixq-metrics v1");
  EXPECT_EQ(second, header);
  std::filesystem::remove(path);
}

class TrainingTest : public ::testing::Test {
 protected:
  TrainConfig cfg = tiny_config();
  synth::Dataset data = synth::generate_dataset(cfg.task);
};

TEST_F(TrainingTest, DeterministicMetricsStream) {
  const TrainResult a = train(cfg, data);
  const TrainResult b = train(cfg, data);
  ASSERT_EQ(a.metrics.size(), b.metrics.size());
  // Steps 0, 4, 8 and the last step 11.
  ASSERT_EQ(a.metrics.size(), 4u);
  EXPECT_EQ(a.metrics.back().step, 11);
  for (std::size_t i = 0; i < a.metrics.size(); ++i) expect_rows_equal(a.metrics[i], b.metrics[i]);
  EXPECT_EQ(a.checkpoint.params, b.checkpoint.params);
  EXPECT_EQ(a.checkpoint.rng_state, b.checkpoint.rng_state);
}

TEST_F(TrainingTest, StepInvariantsHoldEveryStep) {
  cfg.lr = 0.05;  // large steps push the gradients past the clip
  cfg.validate();
  Checkpoint ckpt = initial_checkpoint(cfg, data);
  Rng rng;
  rng.set_state(ckpt.rng_state);
  bool clipped = false;
  for (int s = 0; s < cfg.total_steps; ++s) {
    const MetricsRow r = train_step(ckpt, data, rng);
    EXPECT_EQ(r.step, s);
    EXPECT_LE(r.grad_norm_clipped, cfg.grad_clip + 1e-9);
    EXPECT_GE(r.gate, cfg.quant.g_min);
    EXPECT_LE(r.gate, 1.0);
    EXPECT_TRUE(std::isfinite(r.loss));
    EXPECT_NEAR(r.loss, r.flow_loss + cfg.weights.lambda_tc * r.tc_loss, 1e-9 * (1.0 + r.loss));
    clipped = clipped || r.grad_norm > cfg.grad_clip;
  }
  EXPECT_TRUE(clipped);
  EXPECT_EQ(ckpt.step, static_cast<std::uint64_t>(cfg.total_steps));
}

TEST_F(TrainingTest, ResumeMatchesUninterruptedRun) {
  const TrainResult full = train(cfg, data);

  Checkpoint half = initial_checkpoint(cfg, data);
  Rng rng;
  rng.set_state(half.rng_state);
  for (int s = 0; s < 5; ++s) train_step(half, data, rng);
  half.rng_state = rng.state();
  const std::string path = temp_path("prefixq_resume_test.ckpt");
  save_checkpoint(half, path);
  const Checkpoint loaded = load_checkpoint(path);
  std::filesystem::remove(path);

  TrainOptions opts;
  opts.resume = &loaded;
  const TrainResult rest = train(cfg, data, opts);
  EXPECT_EQ(rest.checkpoint.params, full.checkpoint.params);
  EXPECT_EQ(rest.checkpoint.step, full.checkpoint.step);
  ASSERT_FALSE(rest.metrics.empty());
  expect_rows_equal(rest.metrics.back(), full.metrics.back());
}

TEST_F(TrainingTest, CheckpointRoundTripIsBitExact) {
  const Checkpoint ckpt = train(cfg, data).checkpoint;
  const std::string path = temp_path("prefixq_ckpt_test.ckpt");
  save_checkpoint(ckpt, path);
  const Checkpoint back = load_checkpoint(path);
  EXPECT_EQ(back.params, ckpt.params);
  EXPECT_EQ(back.adam.m, ckpt.adam.m);
  EXPECT_EQ(back.adam.v, ckpt.adam.v);
  EXPECT_EQ(back.adam.t, ckpt.adam.t);
  EXPECT_EQ(back.stats.lower, ckpt.stats.lower);
  EXPECT_EQ(back.step, ckpt.step);
  EXPECT_EQ(back.rng_state, ckpt.rng_state);
  EXPECT_EQ(config_to_json_text(back.config), config_to_json_text(ckpt.config));

  const PolicyConfig policy = cfg.policy();
  const Matrix& h = data.test.front().prefix;
  EXPECT_EQ(prefix_block_forward(h, back.params, policy, true), prefix_block_forward(h, ckpt.params, policy, true));
  EXPECT_EQ(sample_actions(h, back.params, cfg.dims, 5, 3), sample_actions(h, ckpt.params, cfg.dims, 5, 3));

  // Next-step updates agree too.
  Checkpoint a = ckpt, b = back;
  a.config.total_steps = b.config.total_steps = cfg.total_steps + 1;
  Rng ra(5), rb(5);
  expect_rows_equal(train_step(a, data, ra), train_step(b, data, rb));
  EXPECT_EQ(a.params, b.params);

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 40));
  }
  EXPECT_THROW(load_checkpoint(path), CorruptFile);
  std::filesystem::remove(path);
}

TEST_F(TrainingTest, CheckpointWithMismatchedDimsRejected) {
  Checkpoint ckpt = initial_checkpoint(cfg, data);
  ckpt.config.dims.ff_dim = 24;
  const std::string path = temp_path("prefixq_ckpt_dims.ckpt");
  save_checkpoint(ckpt, path);
  EXPECT_THROW(load_checkpoint(path), DimMismatch);
  std::filesystem::remove(path);
}

TEST_F(TrainingTest, EvaluationShiftsAndDims) {
  const Checkpoint ckpt = train(cfg, data).checkpoint;
  const EvalMetrics clean = evaluate(ckpt, data, Shift::parse("clean"));
  const EvalMetrics zero = evaluate(ckpt, data, Shift::parse("gaussian:0"));
  EXPECT_EQ(clean.success_rate, zero.success_rate);
  EXPECT_EQ(clean.mean_error, zero.mean_error);
  EXPECT_EQ(clean.endpoint_error, zero.endpoint_error);
  EXPECT_EQ(clean.episodes, data.train.size());
  const EvalMetrics held = evaluate(ckpt, data, Shift::parse("held-out"));
  EXPECT_EQ(held.episodes, data.test.size());
  EXPECT_GE(held.success_rate, 0.0);
  EXPECT_LE(held.success_rate, 1.0);
  EXPECT_NE(evaluate(ckpt, data, Shift::parse("gaussian:0.5")).mean_error, clean.mean_error);

  synth::TaskSpec other = cfg.task;
  other.model_dim = 16;
  EXPECT_THROW(evaluate(ckpt, synth::generate_dataset(other), Shift::parse("clean")), DimMismatch);
}

TEST_F(TrainingTest, NonFiniteAbortWritesDiagnostic) {
  Checkpoint bad = initial_checkpoint(cfg, data);
  bad.params.mutable_at("expert.head.w")(0, 0) = std::numeric_limits<double>::infinity();
  const std::string path = temp_path("prefixq_diag_test.ckpt");
  std::filesystem::remove(path);
  TrainOptions opts;
  opts.resume = &bad;
  opts.diagnostic_path = path;
  EXPECT_THROW(train(cfg, data, opts), NonFinite);
  EXPECT_TRUE(std::filesystem::exists(path));
  std::filesystem::remove(path);
}

TEST_F(TrainingTest, FixedFlowLossDeterministic) {
  const ParamSet p = initial_checkpoint(cfg, data).params;
  const double a = fixed_flow_loss(p, cfg, data.train, 3, 9);
  EXPECT_EQ(a, fixed_flow_loss(p, cfg, data.train, 3, 9));
  EXPECT_GT(a, 0.0);
}

TEST(Ablation, KnobsAndGrids) {
  const auto& knobs = ablation_knobs();
  for (const char* k : {"L_q", "b_q", "adaptive_ste", "dual_branch", "constraints", "lambda_tc"}) {
    EXPECT_NE(std::find(knobs.begin(), knobs.end(), k), knobs.end()) << k;
  }
  EXPECT_EQ(default_knob_values("b_q"), (std::vector<std::string>{"4", "8", "16"}));
  EXPECT_EQ(default_knob_values("L_q"), (std::vector<std::string>{"1", "2", "6"}));
  const auto lam = default_knob_values("lambda_tc");
  ASSERT_EQ(lam.size(), 11u);
  EXPECT_EQ(lam.front(), "0.0");
  EXPECT_EQ(lam.back(), "1.0");
  EXPECT_EQ(default_knob_values("adaptive_ste"), (std::vector<std::string>{"on", "off"}));

  const TrainConfig base = tiny_config();
  EXPECT_EQ(apply_knob(base, "b_q", "4").quant.bits, 4);
  EXPECT_EQ(apply_knob(base, "L_q", "6").dims.depth, 6);
  EXPECT_FALSE(apply_knob(base, "adaptive_ste", "off").adaptive_ste);
  EXPECT_FALSE(apply_knob(base, "dual_branch", "off").dual_branch);
  EXPECT_EQ(apply_knob(base, "constraints", "off").weights.lambda_tc, 0.0);
  EXPECT_DOUBLE_EQ(apply_knob(base, "lambda_tc", "0.7").weights.lambda_tc, 0.7);
  const TrainConfig noq = apply_knob(base, "quantization", "off");
  EXPECT_FALSE(noq.quantization_enabled);
  EXPECT_FALSE(noq.dual_branch);
  EXPECT_NO_THROW(noq.validate());

  try {
    apply_knob(base, "depth", "2");
    FAIL() << "expected InvalidArgument";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("lambda_tc"), std::string::npos);
  }
  EXPECT_THROW(apply_knob(base, "adaptive_ste", "maybe"), InvalidArgument);
  EXPECT_THROW(apply_knob(base, "b_q", "x"), InvalidArgument);
}

TEST(Ablation, TableRowsAndFormats) {
  TrainConfig base = tiny_config();
  base.total_steps = 4;
  base.warmup_steps = 1;
  const synth::Dataset data = synth::generate_dataset(base.task);
  const AblationTable t = ablate(base, data, "dual_branch", default_knob_values("dual_branch"));
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[0].value, "on");
  EXPECT_EQ(t.rows[1].value, "off");
  EXPECT_EQ(t.rows[1].tc_loss, 0.0);

  const std::string csv = ablation_csv(t);
  std::istringstream in(csv);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0].substr(0, 10), "knob,value");
  for (const std::string& l : lines) EXPECT_EQ(std::count(l.begin(), l.end(), ','), 9);
  EXPECT_EQ(lines[1].substr(0, 15), "dual_branch,on,");

  const std::string md = ablation_markdown(t);
  EXPECT_NE(md.find("| on |"), std::string::npos);
  EXPECT_EQ(std::count(md.begin(), md.end(), '\n'), 4);

  EXPECT_THROW(ablate(base, data, "b_q", {"8", "1"}), InvalidArgument);
}

}  // namespace
}  // namespace prefixq
