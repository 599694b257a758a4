#include "prefixq/objective.hpp"

#include <algorithm>
#include <cmath>

#include "prefixq/errors.hpp"

namespace prefixq {

using diff::Var;

FlowSample make_flow_sample(const ActionChunk& actions, const Matrix& epsilon, double tau) {
  if (shape_of(actions) != shape_of(epsilon)) {
    throw ShapeMismatch("flow sample: actions " + to_string(shape_of(actions)) + " vs noise " +
                        to_string(shape_of(epsilon)));
  }
  if (!(tau >= 0.0 && tau <= 1.0)) throw InvalidArgument("flow sample: tau must lie in [0, 1]");
  FlowSample s;
  s.epsilon = epsilon;
  s.tau = tau;
  s.x_tau = tau * epsilon + (1.0 - tau) * actions;
  s.u_tau = epsilon - actions;
  return s;
}

double fm_loss(const ActionChunk& v, const ActionChunk& u, FmReduction reduction) {
  if (shape_of(v) != shape_of(u)) throw ShapeMismatch("fm_loss: shapes differ");
  const double total = (v - u).squaredNorm();
  return reduction == FmReduction::kSum ? total : total / static_cast<double>(v.size());
}

Var fm_loss(Var v, Var u, FmReduction reduction) {
  const Var d = diff::sub(v, u);
  const Var sq = diff::mul(d, d);
  return reduction == FmReduction::kSum ? diff::sum(sq) : diff::mean(sq);
}

void TCWeights::validate() const {
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0) || !(lambda_tc >= 0.0)) {
    throw InvalidArgument("temporal-complexity weights must be nonnegative");
  }
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw InvalidArgument("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

NormStats NormStats::from_actions(const std::vector<ActionChunk>& chunks, double lower_q, double upper_q) {
  if (chunks.empty()) throw InvalidArgument("normalization statistics need at least one chunk");
  const Eigen::Index dims = chunks.front().cols();
  NormStats stats;
  stats.lower.resize(dims);
  stats.upper.resize(dims);
  for (Eigen::Index j = 0; j < dims; ++j) {
    std::vector<double> column;
    for (const ActionChunk& c : chunks) {
      if (c.cols() != dims) throw ShapeMismatch("normalization statistics: inconsistent action dimension");
      for (Eigen::Index t = 0; t < c.rows(); ++t) column.push_back(c(t, j));
    }
    double lo = quantile(column, lower_q);
    double hi = quantile(column, upper_q);
    if (!(hi - lo > 1e-12)) {
      const double mid = 0.5 * (lo + hi);
      lo = mid - 0.5;
      hi = mid + 0.5;
    }
    stats.lower(j) = lo;
    stats.upper(j) = hi;
  }
  return stats;
}

NormStats NormStats::identity(int action_dim) {
  NormStats s;
  s.lower = Eigen::RowVectorXd::Constant(action_dim, -1.0);
  s.upper = Eigen::RowVectorXd::Constant(action_dim, 1.0);
  return s;
}

void NormStats::validate() const {
  if (lower.size() != upper.size() || lower.size() == 0) throw InvalidArgument("normalization statistics malformed");
  for (Eigen::Index j = 0; j < lower.size(); ++j) {
    if (!(upper(j) > lower(j))) throw InvalidArgument("normalization range must satisfy upper > lower");
  }
}

Eigen::RowVectorXd NormStats::scale() const { return 2.0 / (upper - lower).array(); }

Eigen::RowVectorXd NormStats::offset() const { return -1.0 - lower.array() * scale().array(); }

ActionChunk normalize_actions(const ActionChunk& v, const NormStats& stats) {
  if (v.cols() != stats.dims()) throw ShapeMismatch("normalize_actions: action dimension mismatch");
  const Eigen::RowVectorXd sc = stats.scale();
  const Eigen::RowVectorXd off = stats.offset();
  return (v.array().rowwise() * sc.array()).rowwise() + off.array();
}

Var normalize_actions(Var v, const NormStats& stats) {
  if (v.cols() != stats.dims()) throw ShapeMismatch("normalize_actions: action dimension mismatch");
  diff::Tape& tape = *v.tape();
  const Var sc = tape.constant(Matrix(stats.scale()));
  const Var off = tape.constant(Matrix(stats.offset()));
  return diff::add_row(diff::mul_row(v, sc), off);
}

double temporal_complexity(const Matrix& v, const TCWeights& w) {
  const Eigen::Index T = v.rows();
  if (T < 3) throw InvalidArgument("temporal complexity needs at least 3 time steps");
  const auto D = static_cast<double>(v.cols());
  const double first = (v.bottomRows(T - 1) - v.topRows(T - 1)).squaredNorm() / (static_cast<double>(T - 1) * D);
  const double second = (v.bottomRows(T - 2) - 2.0 * v.middleRows(1, T - 2) + v.topRows(T - 2)).squaredNorm() /
                        (static_cast<double>(T - 2) * D);
  return w.lambda1 * first + w.lambda2 * second;
}

Var temporal_complexity(Var v, const TCWeights& w) {
  const Eigen::Index T = v.rows();
  if (T < 3) throw InvalidArgument("temporal complexity needs at least 3 time steps");
  const Var d1 = diff::sub(diff::slice_rows(v, 1, T - 1), diff::slice_rows(v, 0, T - 1));
  const Var d2 = diff::add(diff::sub(diff::slice_rows(v, 2, T - 2), diff::scale(diff::slice_rows(v, 1, T - 2), 2.0)),
                           diff::slice_rows(v, 0, T - 2));
  const Var m1 = diff::mean(diff::mul(d1, d1));
  const Var m2 = diff::mean(diff::mul(d2, d2));
  return diff::add(diff::scale(m1, w.lambda1), diff::scale(m2, w.lambda2));
}

double tc_hinge(double c_quantized, double c_raw) { return std::max(c_quantized - c_raw, 0.0); }

Var tc_hinge(Var c_quantized, Var c_raw) { return diff::relu(diff::sub(c_quantized, c_raw)); }

namespace {

Var build_raw_velocity(Var prefix, Var x_tau, double tau, const diff::VarMap& params, const PolicyConfig& policy) {
  const Var conditioning =
      policy.raw_branch == RawBranch::kBypassBlock ? prefix : prefix_block_forward(prefix, params, policy, false);
  return expert_velocity(x_tau, tau, conditioning, params, policy.dims);
}

}  // namespace

ActionChunk raw_branch_velocity(const PrefixLatent& prefix, const FlowSample& sample, const ParamSet& params,
                                const PolicyConfig& policy) {
  diff::Tape tape;
  diff::VarMap vars;
  for (const auto& [name, value] : params) vars.emplace(name, tape.constant(value));
  return build_raw_velocity(tape.constant(prefix), tape.constant(sample.x_tau), sample.tau, vars, policy).value();
}

LossTerms dual_branch_loss(diff::Tape& tape, const diff::VarMap& params, const PrefixLatent& prefix,
                           const FlowSample& sample, const PolicyConfig& policy, const LossConfig& loss,
                           const NormStats& stats, const ActionChunk* frozen_raw) {
  loss.weights.validate();
  check_chunk_shape(sample.x_tau, policy.dims);
  const Var h = tape.constant(prefix);
  const Var x = tape.constant(sample.x_tau);
  const Var u = tape.constant(sample.u_tau);

  LossTerms terms;
  const Var quantized_prefix = prefix_block_forward(h, params, policy, policy.quantization_enabled);
  terms.v_quant = expert_velocity(x, sample.tau, quantized_prefix, params, policy.dims);
  terms.flow = fm_loss(terms.v_quant, u, loss.reduction);

  if (!loss.dual_branch) {
    terms.tc = tape.constant(Matrix::Zero(1, 1));
    terms.total = terms.flow;
    return terms;
  }
  if (frozen_raw) {
    check_chunk_shape(*frozen_raw, policy.dims);
    terms.v_raw = tape.constant(*frozen_raw);
  } else {
    terms.v_raw = diff::stop_gradient(build_raw_velocity(h, x, sample.tau, params, policy));
  }
  const Var c_quant = temporal_complexity(normalize_actions(terms.v_quant, stats), loss.weights);
  const Var c_raw = temporal_complexity(normalize_actions(terms.v_raw, stats), loss.weights);
  terms.tc = tc_hinge(c_quant, c_raw);
  terms.total = diff::add(terms.flow, diff::scale(terms.tc, loss.weights.lambda_tc));
  return terms;
}

IsolationReport raw_branch_gradient_isolation_check(const PrefixLatent& prefix, const FlowSample& sample,
                                                    const ParamSet& params, const PolicyConfig& policy,
                                                    const LossConfig& loss, const NormStats& stats) {
  IsolationReport report;
  const ActionChunk raw = raw_branch_velocity(prefix, sample, params, policy);

  auto with_sg = [&](diff::Tape& tape, const diff::VarMap& vars) {
    LossTerms t = dual_branch_loss(tape, vars, prefix, sample, policy, loss, stats, nullptr);
    report.hinge_active = t.tc.value()(0, 0) > 0.0;
    return t.total;
  };
  auto with_constant = [&](diff::Tape& tape, const diff::VarMap& vars) {
    return dual_branch_loss(tape, vars, prefix, sample, policy, loss, stats, &raw).total;
  };
  const diff::ValueAndGrad a = diff::value_and_grad(with_sg, params);
  const diff::ValueAndGrad b = diff::value_and_grad(with_constant, params);

  report.identical = a.value == b.value && a.grad == b.grad;
  for (const auto& [name, g] : a.grad) {
    report.max_abs_difference = std::max(report.max_abs_difference, (g - b.grad.at(name)).cwiseAbs().maxCoeff());
  }
  return report;
}

ActionChunk integrate_flow(const VelocityField& field, const Matrix& epsilon, int n_steps) {
  if (n_steps < 1) throw InvalidArgument("sampling needs at least one integration step");
  const double dt = 1.0 / n_steps;
  Matrix x = epsilon;
  for (int k = 0; k < n_steps; ++k) {
    const double tau = static_cast<double>(n_steps - k) / n_steps;
    x -= dt * field(x, tau);
  }
  return x;
}

Matrix standard_normal_chunk(const ModelDims& dims, std::uint64_t seed) {
  Rng rng(seed);
  return random_normal(dims.horizon, dims.action_dim, rng);
}

ActionChunk sample_actions(const PrefixLatent& prefix, const ParamSet& params, const ModelDims& dims, int n_steps,
                           std::uint64_t seed) {
  // One constant tape for all integration steps keeps parameter copies out
  // of the inner loop.
  diff::Tape tape;
  diff::VarMap vars;
  for (const auto& [name, value] : params) {
    if (name.rfind("expert.", 0) == 0) vars.emplace(name, tape.constant(value));
  }
  const Var cond = tape.constant(prefix);
  auto field = [&](const ActionChunk& x, double tau) {
    return expert_velocity(tape.constant(x), tau, cond, vars, dims).value();
  };
  return integrate_flow(field, standard_normal_chunk(dims, seed), n_steps);
}

}  // namespace prefixq
