// Command-line front end: gen-data, train, eval, ablate, gradcheck,
// quotient-verify. Results go to stdout as JSON; failures go to stderr as
// {"error": {"kind": ..., "message": ...}} with a nonzero exit code.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "prefixq/errors.hpp"
#include "prefixq/harness.hpp"
#include "prefixq/plot.hpp"

namespace {

using namespace prefixq;
using nlohmann::json;

constexpr int kExitError = 1;
constexpr int kExitUsage = 2;
constexpr int kExitCheckFailed = 3;

// Config source shared by the subcommands that build a TrainConfig.
struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> set;
  std::optional<std::string> preset;
  std::optional<int> steps, batch, bits, depth, seed, data_seed;
  std::optional<double> lr, lambda_tc;
  bool no_quant = false, no_dual = false, no_adaptive = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--set", set, "override section.key=value (repeatable)");
    cmd->add_option("--preset", preset, "desk or paper");
    cmd->add_option("--steps", steps, "train.total_steps");
    cmd->add_option("--batch-size", batch, "train.batch_size");
    cmd->add_option("--lr", lr, "train.lr");
    cmd->add_option("--seed", seed, "train.seed");
    cmd->add_option("--data-seed", data_seed, "task.seed");
    cmd->add_option("--bits", bits, "quant.bits");
    cmd->add_option("--depth", depth, "model.depth");
    cmd->add_option("--lambda-tc", lambda_tc, "objective.lambda_tc");
    cmd->add_flag("--no-quant", no_quant, "disable quantization (also disables the dual branch)");
    cmd->add_flag("--no-dual-branch", no_dual, "train on L_q only");
    cmd->add_flag("--no-adaptive-ste", no_adaptive, "fix the surrogate gate at 1");
  }

  TrainConfig build() const {
    TrainConfig cfg = config_path.empty() ? TrainConfig::preset_named("desk") : read_config(config_path);
    std::vector<std::string> o;
    if (preset) o.push_back("train.preset=\"" + *preset + "\"");
    if (steps) o.push_back("train.total_steps=" + std::to_string(*steps));
    if (batch) o.push_back("train.batch_size=" + std::to_string(*batch));
    if (lr) o.push_back("train.lr=" + json(*lr).dump());
    if (seed) o.push_back("train.seed=" + std::to_string(*seed));
    if (data_seed) o.push_back("task.seed=" + std::to_string(*data_seed));
    if (bits) o.push_back("quant.bits=" + std::to_string(*bits));
    if (depth) o.push_back("model.depth=" + std::to_string(*depth));
    if (lambda_tc) o.push_back("objective.lambda_tc=" + json(*lambda_tc).dump());
    if (no_quant) o.insert(o.end(), {"model.quantization_enabled=false", "objective.dual_branch=false"});
    if (no_dual) o.push_back("objective.dual_branch=false");
    if (no_adaptive) o.push_back("model.adaptive_ste=false");
    o.insert(o.end(), set.begin(), set.end());
    cfg = apply_overrides(cfg, o);
    // Warmup cannot exceed a shortened run.
    if (steps && cfg.warmup_steps > cfg.total_steps) cfg.warmup_steps = cfg.total_steps;
    cfg.validate();
    return cfg;
  }
};

synth::Dataset dataset_for(const TrainConfig& cfg, const std::string& data_path) {
  if (data_path.empty()) return synth::generate_dataset(cfg.task);
  synth::Dataset d = synth::load_dataset(data_path);
  if (!(d.spec == cfg.task)) {
    std::cerr << "note: dataset task spec differs from the config; using the dataset's\n";
  }
  return d;
}

json metrics_json(const EvalMetrics& m) {
  return {{"success_rate", m.success_rate},
          {"mean_error", m.mean_error},
          {"endpoint_error", m.endpoint_error},
          {"episodes", m.episodes}};
}

json row_json(const MetricsRow& r) {
  return {{"step", r.step},           {"loss", r.loss},
          {"flow_loss", r.flow_loss}, {"tc_loss", r.tc_loss},
          {"gate", r.gate},           {"lr", r.lr},
          {"grad_norm", r.grad_norm}, {"grad_norm_clipped", r.grad_norm_clipped},
          {"success_train", r.success_train}, {"success_shift", r.success_shift}};
}

void print(const json& j) { std::cout << j.dump(2) << "\n"; }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path + "'");
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw InvalidArgument("bad number '" + item + "' in list '" + text + "'");
    out.push_back(v);
  }
  if (out.empty()) throw InvalidArgument("empty list");
  return out;
}

// gen-data --------------------------------------------------------------

int run_gen_data(const ConfigArgs& ca, const std::string& out, const std::string& world_path,
                 const std::string& discretizer) {
  const TrainConfig cfg = ca.build();
  const synth::Dataset d = synth::generate_dataset(cfg.task);
  synth::save_dataset(d, out);
  json report = {{"dataset", out},
                 {"train_episodes", d.train.size()},
                 {"test_episodes", d.test.size()},
                 {"train_nuisances", d.train_nuisances},
                 {"test_nuisances", d.test_nuisances}};
  if (!world_path.empty()) {
    std::vector<synth::Episode> all = d.train;
    all.insert(all.end(), d.test.begin(), d.test.end());
    const synth::Discretizer disc =
        discretizer == "ideal" ? synth::ideal_discretizer(d.spec) : synth::identity_discretizer();
    quotient::write_world(synth::world_from_dataset(all, disc), world_path);
    report["world"] = world_path;
  }
  print(report);
  return 0;
}

// train -----------------------------------------------------------------

int run_train(const ConfigArgs& ca, const std::string& data_path, const std::string& out,
              const std::string& metrics_path, const std::string& plot_path, const std::string& resume_path,
              bool quiet) {
  const TrainConfig cfg = ca.build();
  const synth::Dataset data = dataset_for(cfg, data_path);

  TrainOptions opts;
  opts.diagnostic_path = out + ".diag";
  std::optional<Checkpoint> resume;
  if (!resume_path.empty()) {
    resume = load_checkpoint(resume_path);
    opts.resume = &*resume;
  }
  if (!quiet) {
    opts.on_metrics = [](const MetricsRow& r) {
      std::fprintf(stderr, "step %6d  loss %.5f  L_q %.5f  L_tc %.5f  gate %.4f  lr %.3e  success %.3f / %.3f\n",
                   r.step, r.loss, r.flow_loss, r.tc_loss, r.gate, r.lr, r.success_train, r.success_shift);
    };
  }
  const TrainResult result = train(cfg, data, opts);
  save_checkpoint(result.checkpoint, out);
  if (!metrics_path.empty()) write_metrics_csv(result.metrics, metrics_path);
  if (!plot_path.empty()) {
    plot::Chart chart{"training loss", "step", "loss", {}, true};
    plot::Series total{"L", {}, {}}, flow{"L_q", {}, {}};
    for (const MetricsRow& r : result.metrics) {
      total.x.push_back(r.step);
      total.y.push_back(r.loss);
      flow.x.push_back(r.step);
      flow.y.push_back(r.flow_loss);
    }
    chart.series = {total, flow};
    plot::write_svg(chart, plot_path);
  }
  json report = {{"checkpoint", out}, {"steps", result.checkpoint.step}};
  if (!result.metrics.empty()) report["final"] = row_json(result.metrics.back());
  print(report);
  return 0;
}

// eval ------------------------------------------------------------------

int run_eval(const std::string& ckpt_path, const std::string& data_path, std::vector<std::string> shifts,
             const std::string& sigma_sweep, const std::string& out_csv, const std::string& plot_path) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const synth::Dataset data = dataset_for(ckpt.config, data_path);
  if (!sigma_sweep.empty()) {
    for (double s : parse_list(sigma_sweep)) shifts.push_back(Shift{ShiftKind::kGaussian, s}.label());
  }
  if (shifts.empty()) shifts = {"clean", "held-out"};

  json results = json::array();
  std::ostringstream csv;
  csv << "shift,sigma,success_rate,mean_error,endpoint_error,episodes\n";
  plot::Series curve{"success", {}, {}};
  for (const std::string& text : shifts) {
    const Shift shift = Shift::parse(text);
    const EvalMetrics m = evaluate(ckpt, data, shift);
    json j = metrics_json(m);
    j["shift"] = shift.label();
    results.push_back(j);
    char line[256];
    std::snprintf(line, sizeof line, "%s,%.17g,%.17g,%.17g,%.17g,%zu\n", shift.label().c_str(), shift.sigma,
                  m.success_rate, m.mean_error, m.endpoint_error, m.episodes);
    csv << line;
    if (shift.kind == ShiftKind::kGaussian) {
      curve.x.push_back(shift.sigma);
      curve.y.push_back(m.success_rate);
    }
  }
  if (!out_csv.empty()) write_text(out_csv, csv.str());
  if (!plot_path.empty()) {
    if (curve.x.empty()) throw InvalidArgument("--plot needs gaussian shifts (use --sigma-sweep)");
    plot::write_svg({"robustness to gaussian prefix noise", "sigma", "success rate", {curve}, false}, plot_path);
  }
  print({{"checkpoint", ckpt_path}, {"step", ckpt.step}, {"results", results}});
  return 0;
}

// ablate ----------------------------------------------------------------

int run_ablate(const ConfigArgs& ca, const std::string& data_path, const std::string& knob, std::string values,
               const std::string& out_csv, const std::string& out_md, const std::string& plot_path) {
  const TrainConfig cfg = ca.build();
  const synth::Dataset data = dataset_for(cfg, data_path);
  std::vector<std::string> list;
  if (values.empty()) {
    list = default_knob_values(knob);
  } else {
    std::stringstream ss(values);
    std::string item;
    while (std::getline(ss, item, ',')) list.push_back(item);
  }
  const AblationTable table = ablate(cfg, data, knob, list, [&](const AblationRow& r) {
    std::fprintf(stderr, "%s=%s  L_q %.5f  held-out %.3f  (%.1f s)\n", knob.c_str(), r.value.c_str(), r.flow_loss,
                 r.held_out.success_rate, r.seconds);
  });
  if (!out_csv.empty()) write_text(out_csv, ablation_csv(table));
  if (!out_md.empty()) write_text(out_md, ablation_markdown(table));
  if (!plot_path.empty()) {
    plot::Series clean{"clean", {}, {}}, held{"held-out", {}, {}};
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
      const auto& r = table.rows[i];
      clean.x.push_back(static_cast<double>(i));
      clean.y.push_back(r.clean.success_rate);
      held.x.push_back(static_cast<double>(i));
      held.y.push_back(r.held_out.success_rate);
    }
    plot::write_svg({"ablation: " + knob + " (row index)", knob, "success rate", {clean, held}, false}, plot_path);
  }
  json rows = json::array();
  for (const AblationRow& r : table.rows) {
    rows.push_back({{"value", r.value},
                    {"flow_loss", r.flow_loss},
                    {"tc_loss", r.tc_loss},
                    {"gate", r.gate},
                    {"clean", metrics_json(r.clean)},
                    {"held_out", metrics_json(r.held_out)},
                    {"seconds", r.seconds}});
  }
  print({{"knob", knob}, {"rows", rows}});
  return 0;
}

// gradcheck -------------------------------------------------------------

int run_gradcheck(const ConfigArgs& ca, int instances, double tolerance) {
  const TrainConfig cfg = ca.build();
  const PolicyConfig policy = cfg.policy();
  const LossConfig loss = cfg.loss();
  const synth::Dataset data = synth::generate_dataset(cfg.task);
  Rng rng(derive_seed(cfg.seed, 77));
  json report = json::array();
  bool ok = true;
  for (int k = 0; k < instances; ++k) {
    ParamSet params = init_params(rng.bits(), cfg.dims).merged();
    // Move away from the initial LN and gate values so every path is live.
    for (const std::string& name : params.names()) {
      Matrix& m = params.mutable_at(name);
      m += random_normal(m.rows(), m.cols(), rng, 0.1);
    }
    const synth::Episode& e = data.train[rng.index(data.train.size())];
    const FlowSample s =
        make_flow_sample(e.expert, random_normal(cfg.dims.horizon, cfg.dims.action_dim, rng), rng.uniform());
    auto fn = [&](diff::Tape& t, const diff::VarMap& v) {
      return dual_branch_loss(t, v, e.prefix, s, policy, loss, data.stats).total;
    };
    diff::FdOptions opts;
    opts.tolerance = tolerance;
    opts.seed = static_cast<std::uint64_t>(k);
    const diff::FdReport r = diff::finite_difference_check(fn, params, opts);
    ok = ok && r.passed;
    report.push_back({{"instance", k},
                      {"passed", r.passed},
                      {"max_relative_error", r.max_relative_error},
                      {"worst_parameter", r.worst_parameter},
                      {"comparisons", r.comparisons},
                      {"surrogate_sites", r.surrogate_sites},
                      {"surrogate_flagged", r.surrogate_flagged}});
  }
  print({{"passed", ok}, {"tolerance", tolerance}, {"instances", report}});
  return ok ? 0 : kExitCheckFailed;
}

// quotient-verify -------------------------------------------------------

int run_quotient_verify(const std::string& path, double tol) {
  const quotient::DiscreteWorld world = quotient::read_world(path);
  const quotient::QuotientSummary s = quotient::summarize_quotient(world, tol);
  json classes = json::object();
  for (const auto& [cls, members] : quotient::classes_of(s.partition)) classes[std::to_string(cls)] = members;
  const bool ok = s.sufficient && s.minimal && s.round_trip;
  print({{"world", path},
         {"latents", s.n_latents},
         {"classes", s.n_classes},
         {"sufficient", s.sufficient},
         {"minimal", s.minimal},
         {"round_trip", s.round_trip},
         {"partition", classes}});
  return ok ? 0 : kExitCheckFailed;
}

void print_error(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prefixq: quantized prefix bottleneck with dual-branch flow matching on synthetic tasks"};
  app.require_subcommand(1);

  ConfigArgs gen_cfg, train_cfg, ablate_cfg, grad_cfg;

  std::string gen_out = "data.pqd", gen_world, gen_disc = "identity";
  auto* gen = app.add_subcommand("gen-data", "generate and save a synthetic dataset");
  gen_cfg.attach(gen);
  gen->add_option("--out", gen_out, "dataset file")->capture_default_str();
  gen->add_option("--world", gen_world, "also write the finite world (JSON) for quotient-verify");
  gen->add_option("--discretizer", gen_disc, "latent key for --world")
      ->check(CLI::IsMember({"identity", "ideal"}))
      ->capture_default_str();

  std::string train_data, train_out = "model.pqc", train_metrics, train_plot, train_resume;
  bool train_quiet = false;
  auto* tr = app.add_subcommand("train", "train a policy");
  train_cfg.attach(tr);
  tr->add_option("--data", train_data, "dataset file (default: generate from the task section)");
  tr->add_option("--out", train_out, "checkpoint file")->capture_default_str();
  tr->add_option("--metrics", train_metrics, "metrics CSV");
  tr->add_option("--plot", train_plot, "loss curve SVG");
  tr->add_option("--resume", train_resume, "continue from a checkpoint");
  tr->add_flag("--quiet", train_quiet, "no progress lines on stderr");

  std::string eval_ckpt, eval_data, eval_sweep, eval_out, eval_plot;
  std::vector<std::string> eval_shifts;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint under nuisance shift");
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  ev->add_option("--data", eval_data, "dataset file (default: regenerate from the checkpoint config)");
  ev->add_option("--shift", eval_shifts, "clean | held-out | gaussian:<sigma> (repeatable)");
  ev->add_option("--sigma-sweep", eval_sweep, "comma-separated gaussian sigmas, e.g. 0,0.02,0.04");
  ev->add_option("--out", eval_out, "results CSV");
  ev->add_option("--plot", eval_plot, "success-vs-sigma SVG");

  std::string ab_data, ab_knob, ab_values, ab_out, ab_md, ab_plot;
  auto* ab = app.add_subcommand("ablate", "train and evaluate one run per knob value");
  ablate_cfg.attach(ab);
  ab->add_option("--knob", ab_knob, "L_q, b_q, adaptive_ste, dual_branch, constraints, lambda_tc, quantization")
      ->required();
  ab->add_option("--values", ab_values, "comma-separated values (default: the knob's standard grid)");
  ab->add_option("--data", ab_data, "dataset file");
  ab->add_option("--out", ab_out, "table CSV");
  ab->add_option("--markdown", ab_md, "table Markdown");
  ab->add_option("--plot", ab_plot, "success per row SVG");

  int gc_instances = 5;
  double gc_tol = 1e-6;
  auto* gc = app.add_subcommand("gradcheck", "compare analytic and finite-difference gradients of the loss");
  grad_cfg.attach(gc);
  gc->add_option("--instances", gc_instances, "random instances")->check(CLI::PositiveNumber)->capture_default_str();
  gc->add_option("--tolerance", gc_tol, "max relative error")->capture_default_str();

  std::string qv_world;
  double qv_tol = quotient::kDefaultTolerance;
  auto* qv = app.add_subcommand("quotient-verify", "build and check the action quotient of a finite world");
  qv->add_option("--world", qv_world, "world JSON file")->required();
  qv->add_option("--tol", qv_tol, "total-variation tolerance")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return kExitUsage;
  }

  try {
    if (*gen) return run_gen_data(gen_cfg, gen_out, gen_world, gen_disc);
    if (*tr) return run_train(train_cfg, train_data, train_out, train_metrics, train_plot, train_resume, train_quiet);
    if (*ev) return run_eval(eval_ckpt, eval_data, eval_shifts, eval_sweep, eval_out, eval_plot);
    if (*ab) return run_ablate(ablate_cfg, ab_data, ab_knob, ab_values, ab_out, ab_md, ab_plot);
    if (*gc) return run_gradcheck(grad_cfg, gc_instances, gc_tol);
    if (*qv) return run_quotient_verify(qv_world, qv_tol);
  } catch (const Error& e) {
    print_error(e.kind(), e.what());
    return kExitError;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return kExitError;
  }
  return kExitUsage;
}
