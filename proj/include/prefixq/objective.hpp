#pragma once

// Flow-matching targets, the dual-branch objective with its relative
// temporal-complexity hinge, and Euler sampling of the learned field.

#include <cstdint>
#include <functional>
#include <vector>

#include "prefixq/policy.hpp"

namespace prefixq {

struct FlowSample {
  Matrix epsilon;
  double tau = 0.0;
  Matrix x_tau;  // tau·epsilon + (1 - tau)·a
  Matrix u_tau;  // epsilon - a
};

FlowSample make_flow_sample(const ActionChunk& actions, const Matrix& epsilon, double tau);

enum class FmReduction { kSum, kMean };

double fm_loss(const ActionChunk& v, const ActionChunk& u, FmReduction reduction = FmReduction::kSum);
diff::Var fm_loss(diff::Var v, diff::Var u, FmReduction reduction = FmReduction::kSum);

struct TCWeights {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double lambda_tc = 0.3;

  void validate() const;
};

// Per-dimension affine map taking [lower, upper] to [-1, 1].
struct NormStats {
  Eigen::RowVectorXd lower;
  Eigen::RowVectorXd upper;

  // q01/q99 per dimension over every row of every chunk. Dimensions whose
  // range is degenerate get a unit-width range centred on their value.
  static NormStats from_actions(const std::vector<ActionChunk>& chunks, double lower_q = 0.01,
                                double upper_q = 0.99);
  static NormStats identity(int action_dim);

  void validate() const;
  Eigen::Index dims() const { return lower.size(); }
  Eigen::RowVectorXd scale() const;   // 2 / (upper - lower)
  Eigen::RowVectorXd offset() const;  // -1 - lower·scale
};

// Linear-interpolated empirical quantile of an unsorted sample.
double quantile(std::vector<double> values, double q);

ActionChunk normalize_actions(const ActionChunk& v, const NormStats& stats);
diff::Var normalize_actions(diff::Var v, const NormStats& stats);

// lambda1 · mean squared first difference + lambda2 · mean squared second
// difference, means over (T-1)·D and (T-2)·D entries.
double temporal_complexity(const Matrix& v, const TCWeights& w);
diff::Var temporal_complexity(diff::Var v, const TCWeights& w);

double tc_hinge(double c_quantized, double c_raw);
diff::Var tc_hinge(diff::Var c_quantized, diff::Var c_raw);

struct LossConfig {
  TCWeights weights;
  bool dual_branch = true;
  FmReduction reduction = FmReduction::kSum;
};

struct LossTerms {
  diff::Var total;
  diff::Var flow;      // L_q
  diff::Var tc;        // hinge term (zero constant when dual branch is off)
  diff::Var v_quant;
  diff::Var v_raw;     // invalid when dual branch is off
};

// Reference-branch velocity with no tape involvement.
ActionChunk raw_branch_velocity(const PrefixLatent& prefix, const FlowSample& sample, const ParamSet& params,
                                const PolicyConfig& policy);

// Builds L = L_q + lambda_tc · [C(N(v_q)) - C(N(sg v_r))]_+ on `tape` for a
// single (prefix, sample) pair. When `frozen_raw` is given it is used as the
// reference velocity instead of recomputing it.
LossTerms dual_branch_loss(diff::Tape& tape, const diff::VarMap& params, const PrefixLatent& prefix,
                           const FlowSample& sample, const PolicyConfig& policy, const LossConfig& loss,
                           const NormStats& stats, const ActionChunk* frozen_raw = nullptr);

struct IsolationReport {
  bool identical = false;
  bool hinge_active = false;
  double max_abs_difference = 0.0;
};

// Gradient of the full objective compared bit-for-bit with the gradient when
// the reference velocity is supplied as a precomputed constant.
IsolationReport raw_branch_gradient_isolation_check(const PrefixLatent& prefix, const FlowSample& sample,
                                                    const ParamSet& params, const PolicyConfig& policy,
                                                    const LossConfig& loss, const NormStats& stats);

using VelocityField = std::function<ActionChunk(const ActionChunk& x, double tau)>;

// Euler integration from tau = 1 (x = epsilon) to tau = 0 in n_steps equal
// steps of x <- x - dt·v(x, tau).
ActionChunk integrate_flow(const VelocityField& field, const Matrix& epsilon, int n_steps);

Matrix standard_normal_chunk(const ModelDims& dims, std::uint64_t seed);

// `prefix` is what the expert conditions on (block output for the
// quantized model).
ActionChunk sample_actions(const PrefixLatent& prefix, const ParamSet& params, const ModelDims& dims, int n_steps,
                           std::uint64_t seed);

}  // namespace prefixq
