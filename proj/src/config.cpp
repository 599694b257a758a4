#include <algorithm>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "prefixq/errors.hpp"
#include "prefixq/harness.hpp"

namespace prefixq {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "prefixq-config";
constexpr int kVersion = 1;

const char* reduction_name(FmReduction r) { return r == FmReduction::kSum ? "sum" : "mean"; }

FmReduction parse_reduction(const std::string& s) {
  if (s == "sum") return FmReduction::kSum;
  if (s == "mean") return FmReduction::kMean;
  throw InvalidArgument("config: fm_reduction must be 'sum' or 'mean', got '" + s + "'");
}

const char* raw_branch_name(RawBranch r) {
  return r == RawBranch::kBypassBlock ? "bypass_block" : "bypass_quantizer";
}

RawBranch parse_raw_branch(const std::string& s) {
  if (s == "bypass_block") return RawBranch::kBypassBlock;
  if (s == "bypass_quantizer") return RawBranch::kBypassQuantizer;
  throw InvalidArgument("config: raw_branch must be 'bypass_block' or 'bypass_quantizer', got '" + s + "'");
}

json to_json(const TrainConfig& c) {
  json j;
  j["format"] = kFormat;
  j["version"] = kVersion;
  j["train"] = {{"preset", c.preset},
                {"lr", c.lr},
                {"lr_floor", c.lr_floor},
                {"weight_decay", c.weight_decay},
                {"grad_clip", c.grad_clip},
                {"adam_beta1", c.adam_beta1},
                {"adam_beta2", c.adam_beta2},
                {"adam_eps", c.adam_eps},
                {"warmup_steps", c.warmup_steps},
                {"total_steps", c.total_steps},
                {"batch_size", c.batch_size},
                {"seed", c.seed},
                {"log_every", c.log_every},
                {"eval_in_metrics", c.eval_in_metrics}};
  j["model"] = {{"n_heads", c.dims.n_heads},
                {"ff_dim", c.dims.ff_dim},
                {"depth", c.dims.depth},
                {"expert_hidden", c.dims.expert_hidden},
                {"cond_dim", c.dims.cond_dim},
                {"tau_frequencies", c.dims.tau_frequencies},
                {"quantization_enabled", c.quantization_enabled},
                {"adaptive_ste", c.adaptive_ste}};
  j["quant"] = {{"bits", c.quant.bits}, {"g_min", c.quant.g_min}, {"scale_epsilon", c.quant.scale_epsilon}};
  j["objective"] = {{"lambda1", c.weights.lambda1},
                    {"lambda2", c.weights.lambda2},
                    {"lambda_tc", c.weights.lambda_tc},
                    {"dual_branch", c.dual_branch},
                    {"fm_reduction", reduction_name(c.fm_reduction)},
                    {"raw_branch", raw_branch_name(c.raw_branch)}};
  const synth::TaskSpec& t = c.task;
  j["task"] = {{"n_tasks", t.n_tasks},
               {"n_nuisances", t.n_nuisances},
               {"horizon", t.horizon},
               {"action_dim", t.action_dim},
               {"prefix_tokens", t.prefix_tokens},
               {"model_dim", t.model_dim},
               {"task_rows", t.task_rows},
               {"nuisance_scale", t.nuisance_scale},
               {"obs_noise", t.obs_noise},
               {"train_fraction", t.train_fraction},
               {"target_radius", t.target_radius},
               {"seed", t.seed}};
  j["eval"] = {{"sample_steps", c.sample_steps},
               {"success_tolerance", c.success_tolerance},
               {"step_tolerance", c.step_tolerance},
               {"seed", c.eval_seed}};
  return j;
}

// Reads known keys of one section into fields; rejects unknown keys so that
// misspelled overrides fail loudly.
class Section {
 public:
  Section(const json& root, const std::string& name) : name_(name) {
    if (!root.contains(name)) return;
    obj_ = root.at(name);
    if (!obj_.is_object()) throw InvalidArgument("config: section '" + name + "' must be an object");
  }

  template <class T>
  void get(const std::string& key, T& field) {
    seen_.push_back(key);
    if (!obj_.contains(key)) return;
    try {
      field = obj_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw InvalidArgument("config: " + name_ + "." + key + ": " + e.what());
    }
  }

  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (std::find(seen_.begin(), seen_.end(), key) == seen_.end()) {
        throw InvalidArgument("config: unknown key " + name_ + "." + key);
      }
    }
  }

 private:
  std::string name_;
  json obj_ = json::object();
  std::vector<std::string> seen_;
};

TrainConfig from_json(const json& j) {
  if (!j.is_object()) throw CorruptFile("config: top level must be an object");
  if (j.contains("format") && j.at("format") != kFormat) throw CorruptFile("config: unexpected format tag");
  if (j.contains("version") && j.at("version") != kVersion) {
    throw VersionMismatch("config: version " + j.at("version").dump() + ", expected " + std::to_string(kVersion));
  }
  for (const auto& [key, value] : j.items()) {
    static const std::vector<std::string> known = {"format", "version", "train", "model",
                                                   "quant",  "objective", "task", "eval"};
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw InvalidArgument("config: unknown section '" + key + "'");
    }
  }

  std::string preset = "desk";
  if (j.contains("train") && j.at("train").contains("preset")) preset = j.at("train").at("preset").get<std::string>();
  TrainConfig c = TrainConfig::preset_named(preset);

  Section train(j, "train");
  train.get("preset", c.preset);
  train.get("lr", c.lr);
  train.get("lr_floor", c.lr_floor);
  train.get("weight_decay", c.weight_decay);
  train.get("grad_clip", c.grad_clip);
  train.get("adam_beta1", c.adam_beta1);
  train.get("adam_beta2", c.adam_beta2);
  train.get("adam_eps", c.adam_eps);
  train.get("warmup_steps", c.warmup_steps);
  train.get("total_steps", c.total_steps);
  train.get("batch_size", c.batch_size);
  train.get("seed", c.seed);
  train.get("log_every", c.log_every);
  train.get("eval_in_metrics", c.eval_in_metrics);
  train.finish();

  Section model(j, "model");
  model.get("n_heads", c.dims.n_heads);
  model.get("ff_dim", c.dims.ff_dim);
  model.get("depth", c.dims.depth);
  model.get("expert_hidden", c.dims.expert_hidden);
  model.get("cond_dim", c.dims.cond_dim);
  model.get("tau_frequencies", c.dims.tau_frequencies);
  model.get("quantization_enabled", c.quantization_enabled);
  model.get("adaptive_ste", c.adaptive_ste);
  model.finish();

  Section quant(j, "quant");
  quant.get("bits", c.quant.bits);
  quant.get("g_min", c.quant.g_min);
  quant.get("scale_epsilon", c.quant.scale_epsilon);
  quant.finish();

  Section objective(j, "objective");
  std::string reduction = reduction_name(c.fm_reduction);
  std::string raw = raw_branch_name(c.raw_branch);
  objective.get("lambda1", c.weights.lambda1);
  objective.get("lambda2", c.weights.lambda2);
  objective.get("lambda_tc", c.weights.lambda_tc);
  objective.get("dual_branch", c.dual_branch);
  objective.get("fm_reduction", reduction);
  objective.get("raw_branch", raw);
  objective.finish();
  c.fm_reduction = parse_reduction(reduction);
  c.raw_branch = parse_raw_branch(raw);

  Section task(j, "task");
  task.get("n_tasks", c.task.n_tasks);
  task.get("n_nuisances", c.task.n_nuisances);
  task.get("horizon", c.task.horizon);
  task.get("action_dim", c.task.action_dim);
  task.get("prefix_tokens", c.task.prefix_tokens);
  task.get("model_dim", c.task.model_dim);
  task.get("task_rows", c.task.task_rows);
  task.get("nuisance_scale", c.task.nuisance_scale);
  task.get("obs_noise", c.task.obs_noise);
  task.get("train_fraction", c.task.train_fraction);
  task.get("target_radius", c.task.target_radius);
  task.get("seed", c.task.seed);
  task.finish();

  Section eval(j, "eval");
  eval.get("sample_steps", c.sample_steps);
  eval.get("success_tolerance", c.success_tolerance);
  eval.get("step_tolerance", c.step_tolerance);
  eval.get("seed", c.eval_seed);
  eval.finish();

  c.sync_dims();
  return c;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string config_to_json_text(const TrainConfig& cfg) { return to_json(cfg).dump(2); }

TrainConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw CorruptFile(std::string("config: malformed JSON: ") + e.what());
  }
  return from_json(j);
}

TrainConfig read_config(const std::string& path) { return config_from_json_text(slurp(path)); }

void write_config(const TrainConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config file " + path);
  out << config_to_json_text(cfg) << '\n';
  if (!out) throw IoError("failed writing config file " + path);
}

TrainConfig apply_overrides(const TrainConfig& cfg, const std::vector<std::string>& overrides) {
  json j = to_json(cfg);
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    const auto dot = o.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      throw InvalidArgument("override '" + o + "' must look like section.key=value");
    }
    const std::string section = o.substr(0, dot);
    const std::string key = o.substr(dot + 1, eq - dot - 1);
    const std::string value = o.substr(eq + 1);
    json parsed;
    try {
      parsed = json::parse(value);
    } catch (const json::parse_error&) {
      parsed = value;
    }
    j[section][key] = parsed;
    // Switching preset re-derives the preset's learning rate unless a later
    // override sets it explicitly.
    if (section == "train" && key == "preset") j["train"].erase("lr");
  }
  return from_json(j);
}

}  // namespace prefixq
