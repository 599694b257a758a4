#pragma once

// Quantized prefix transformer block and the flow-matching action expert.
//
// Parameter naming (all live in one ParamSet):
//   block.<l>.{wq,wk,wv,wo}.{w,b}           attention, l = 0..L_q-1
//   block.<l>.ln1.{gamma,beta}, block.<l>.ln2.{gamma,beta}
//   block.<l>.mlp.{l1,l2}.{w,b}
//   block.<l>.gate.alpha                        1×1, one gate per layer
//   expert.{tau,cond,l1,l2,head}.{w,b}

#include <cstdint>
#include <string>

#include "prefixq/diffcore.hpp"
#include "prefixq/quantizer.hpp"

namespace prefixq {

// M×d prefix token embeddings.
using PrefixLatent = Matrix;
// T×D action trajectory (or velocity field over a trajectory).
using ActionChunk = Matrix;

struct ModelDims {
  int prefix_tokens = 16;  // M
  int model_dim = 64;      // d
  int n_heads = 8;
  int ff_dim = 256;        // d_ff
  int depth = 1;           // L_q
  int horizon = 8;         // T
  int action_dim = 2;      // D
  int expert_hidden = 128;
  int cond_dim = 32;       // width of the tau and prefix embeddings
  int tau_frequencies = 8;

  void validate() const;
  bool operator==(const ModelDims&) const = default;
};

// Which prefix the reference (raw) branch conditions on.
enum class RawBranch {
  kBypassBlock,     // raw prefix H, block skipped entirely
  kBypassQuantizer  // block applied with its quantization slot disabled
};

struct PolicyConfig {
  ModelDims dims;
  QuantConfig quant;
  bool quantization_enabled = true;
  // When false the surrogate gate is fixed at 1 (plain straight-through).
  bool adaptive_ste = true;
  RawBranch raw_branch = RawBranch::kBypassBlock;

  void validate() const;
};

struct PolicyParams {
  ParamSet block;   // includes the per-layer gate alphas
  ParamSet expert;

  ParamSet merged() const;
  static PolicyParams split(const ParamSet& all);
};

PolicyParams init_params(std::uint64_t seed, const ModelDims& dims);

std::string block_prefix(int layer);

// Per-layer: H_att = LN(H + MHA(H)); H_hat = STE-quantize(H_att) if enabled;
// out = LN(H_hat + MLP(H_hat)). Repeated dims.depth times.
diff::Var prefix_block_forward(diff::Var tokens, const diff::VarMap& params, const PolicyConfig& cfg,
                               bool quantization_enabled);

// Velocity prediction v(x_tau, tau | prefix), shape T×D.
diff::Var expert_velocity(diff::Var x_tau, double tau, diff::Var prefix, const diff::VarMap& params,
                          const ModelDims& dims);

// 1×(2F) features [sin(w_k tau), cos(w_k tau)], w_k = 2^k.
Matrix fourier_features(double tau, int frequencies);

// Non-differentiating conveniences built on the same code path.
PrefixLatent prefix_block_forward(const PrefixLatent& tokens, const ParamSet& params, const PolicyConfig& cfg,
                                  bool quantization_enabled);
ActionChunk expert_velocity(const ActionChunk& x_tau, double tau, const PrefixLatent& prefix,
                            const ParamSet& params, const ModelDims& dims);

// Mean gate value over layers.
double mean_gate(const ParamSet& params, const PolicyConfig& cfg);

void check_prefix_shape(const Matrix& prefix, const ModelDims& dims);
void check_chunk_shape(const Matrix& chunk, const ModelDims& dims);

}  // namespace prefixq
