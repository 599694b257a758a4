#include "prefixq/policy.hpp"

#include <cmath>

#include "prefixq/errors.hpp"

namespace prefixq {

using diff::Var;
using diff::VarMap;

void ModelDims::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw InvalidArgument(std::string("model dimension ") + name + " must be >= 1");
  };
  positive(prefix_tokens, "M");
  positive(model_dim, "d");
  positive(n_heads, "n_heads");
  positive(ff_dim, "d_ff");
  positive(depth, "L_q");
  positive(action_dim, "D");
  positive(expert_hidden, "expert_hidden");
  positive(cond_dim, "cond_dim");
  positive(tau_frequencies, "tau_frequencies");
  if (horizon < 3) throw InvalidArgument("horizon T must be >= 3");
  if (model_dim % n_heads != 0) {
    throw InvalidArgument("model dimension d=" + std::to_string(model_dim) + " is not divisible by n_heads=" +
                          std::to_string(n_heads));
  }
}

void PolicyConfig::validate() const {
  dims.validate();
  quant.validate();
}

ParamSet PolicyParams::merged() const {
  ParamSet all = block;
  all.merge(expert);
  return all;
}

PolicyParams PolicyParams::split(const ParamSet& all) {
  PolicyParams p;
  p.block = all.subset("block.");
  p.expert = all.subset("expert.");
  if (p.block.size() + p.expert.size() != all.size()) throw InvalidArgument("unexpected parameter names");
  return p;
}

std::string block_prefix(int layer) { return "block." + std::to_string(layer) + "."; }

namespace {

Matrix uniform_weight(int fan_in, int fan_out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return random_uniform(fan_in, fan_out, rng, -bound, bound);
}

void add_linear(ParamSet& set, const std::string& name, int fan_in, int fan_out, Rng& rng) {
  set.add(name + "w", uniform_weight(fan_in, fan_out, rng));
  set.add(name + "b", Matrix::Zero(1, fan_out));
}

const Var& param(const VarMap& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw InvalidArgument("missing parameter '" + name + "'");
  return it->second;
}

Var linear(Var x, const VarMap& params, const std::string& name) {
  return diff::add_row(diff::matmul(x, param(params, name + "w")), param(params, name + "b"));
}

Var attention(Var h, const VarMap& params, const std::string& p, int n_heads) {
  const Var q = linear(h, params, p + "wq.");
  const Var k = linear(h, params, p + "wk.");
  const Var v = linear(h, params, p + "wv.");
  const Eigen::Index head_dim = h.cols() / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Var> heads;
  heads.reserve(static_cast<std::size_t>(n_heads));
  for (int i = 0; i < n_heads; ++i) {
    const Var qh = diff::slice_cols(q, i * head_dim, head_dim);
    const Var kh = diff::slice_cols(k, i * head_dim, head_dim);
    const Var vh = diff::slice_cols(v, i * head_dim, head_dim);
    const Var weights = diff::softmax_rows(diff::scale(diff::matmul_nt(qh, kh), inv_sqrt));
    heads.push_back(diff::matmul(weights, vh));
  }
  return linear(diff::concat_cols(heads), params, p + "wo.");
}

}  // namespace

PolicyParams init_params(std::uint64_t seed, const ModelDims& dims) {
  dims.validate();
  Rng rng(seed);
  PolicyParams out;
  const int d = dims.model_dim;
  for (int l = 0; l < dims.depth; ++l) {
    const std::string p = block_prefix(l);
    for (const char* proj : {"wq.", "wk.", "wv.", "wo."}) add_linear(out.block, p + proj, d, d, rng);
    out.block.add(p + "ln1.gamma", Matrix::Ones(1, d));
    out.block.add(p + "ln1.beta", Matrix::Zero(1, d));
    add_linear(out.block, p + "mlp.l1.", d, dims.ff_dim, rng);
    add_linear(out.block, p + "mlp.l2.", dims.ff_dim, d, rng);
    out.block.add(p + "ln2.gamma", Matrix::Ones(1, d));
    out.block.add(p + "ln2.beta", Matrix::Zero(1, d));
    out.block.add(p + "gate.alpha", Matrix::Zero(1, 1));
  }
  const int chunk = dims.horizon * dims.action_dim;
  add_linear(out.expert, "expert.tau.", 2 * dims.tau_frequencies, dims.cond_dim, rng);
  add_linear(out.expert, "expert.cond.", d, dims.cond_dim, rng);
  add_linear(out.expert, "expert.l1.", chunk + 2 * dims.cond_dim, dims.expert_hidden, rng);
  add_linear(out.expert, "expert.l2.", dims.expert_hidden, dims.expert_hidden, rng);
  add_linear(out.expert, "expert.head.", dims.expert_hidden, chunk, rng);
  return out;
}

void check_prefix_shape(const Matrix& prefix, const ModelDims& dims) {
  if (prefix.rows() != dims.prefix_tokens || prefix.cols() != dims.model_dim) {
    throw ShapeMismatch("prefix is " + to_string(shape_of(prefix)) + ", expected " +
                        std::to_string(dims.prefix_tokens) + "x" + std::to_string(dims.model_dim));
  }
}

void check_chunk_shape(const Matrix& chunk, const ModelDims& dims) {
  if (chunk.rows() != dims.horizon || chunk.cols() != dims.action_dim) {
    throw ShapeMismatch("action chunk is " + to_string(shape_of(chunk)) + ", expected " +
                        std::to_string(dims.horizon) + "x" + std::to_string(dims.action_dim));
  }
}

Var prefix_block_forward(Var tokens, const VarMap& params, const PolicyConfig& cfg, bool quantization_enabled) {
  check_prefix_shape(tokens.value(), cfg.dims);
  Var h = tokens;
  for (int l = 0; l < cfg.dims.depth; ++l) {
    const std::string p = block_prefix(l);
    Var att = diff::layer_norm(diff::add(h, attention(h, params, p, cfg.dims.n_heads)), param(params, p + "ln1.gamma"),
                               param(params, p + "ln1.beta"));
    if (quantization_enabled) {
      att = cfg.adaptive_ste ? ste_quantize(att, cfg.quant, param(params, p + "gate.alpha"))
                             : ste_quantize(att, cfg.quant, 1.0);
    }
    const Var mlp = linear(diff::gelu(linear(att, params, p + "mlp.l1.")), params, p + "mlp.l2.");
    h = diff::layer_norm(diff::add(att, mlp), param(params, p + "ln2.gamma"), param(params, p + "ln2.beta"));
  }
  return h;
}

Matrix fourier_features(double tau, int frequencies) {
  Matrix f(1, 2 * frequencies);
  for (int k = 0; k < frequencies; ++k) {
    const double w = std::ldexp(1.0, k);
    f(0, k) = std::sin(w * tau);
    f(0, frequencies + k) = std::cos(w * tau);
  }
  return f;
}

Var expert_velocity(Var x_tau, double tau, Var prefix, const VarMap& params, const ModelDims& dims) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw InvalidArgument("tau must lie in [0, 1]");
  check_chunk_shape(x_tau.value(), dims);
  if (prefix.cols() != dims.model_dim) throw ShapeMismatch("prefix width does not match model dimension");
  diff::Tape& tape = *x_tau.tape();
  const Var tau_embed = diff::gelu(linear(tape.constant(fourier_features(tau, dims.tau_frequencies)), params,
                                          "expert.tau."));
  const Var cond = diff::gelu(linear(diff::mean_rows(prefix), params, "expert.cond."));
  const Var flat = diff::reshape(x_tau, 1, dims.horizon * dims.action_dim);
  Var h = diff::concat_cols({flat, tau_embed, cond});
  h = diff::gelu(linear(h, params, "expert.l1."));
  h = diff::gelu(linear(h, params, "expert.l2."));
  return diff::reshape(linear(h, params, "expert.head."), dims.horizon, dims.action_dim);
}

namespace {

VarMap constants(diff::Tape& tape, const ParamSet& params, const std::string& prefix) {
  VarMap vars;
  for (const auto& [name, value] : params) {
    if (name.rfind(prefix, 0) == 0) vars.emplace(name, tape.constant(value));
  }
  return vars;
}

}  // namespace

PrefixLatent prefix_block_forward(const PrefixLatent& tokens, const ParamSet& params, const PolicyConfig& cfg,
                                  bool quantization_enabled) {
  diff::Tape tape;
  const VarMap vars = constants(tape, params, "block.");
  return prefix_block_forward(tape.constant(tokens), vars, cfg, quantization_enabled).value();
}

ActionChunk expert_velocity(const ActionChunk& x_tau, double tau, const PrefixLatent& prefix,
                            const ParamSet& params, const ModelDims& dims) {
  diff::Tape tape;
  const VarMap vars = constants(tape, params, "expert.");
  return expert_velocity(tape.constant(x_tau), tau, tape.constant(prefix), vars, dims).value();
}

double mean_gate(const ParamSet& params, const PolicyConfig& cfg) {
  if (!cfg.adaptive_ste) return 1.0;
  double total = 0.0;
  for (int l = 0; l < cfg.dims.depth; ++l) {
    total += gate_value(GateState{params.at(block_prefix(l) + "gate.alpha")(0, 0)}, cfg.quant);
  }
  return total / cfg.dims.depth;
}

}  // namespace prefixq
