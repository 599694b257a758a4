#pragma once

// Symmetric uniform b-bit per-token activation quantizer and its gated
// straight-through estimator.

#include "prefixq/diffcore.hpp"

namespace prefixq {

struct QuantConfig {
  int bits = 8;
  double g_min = 0.1;
  double scale_epsilon = 1e-12;

  int q_max() const;
  void validate() const;
};

struct GateState {
  double alpha = 0.0;
};

// Round half to even, independent of the floating-point environment.
double round_half_even(double x);

// Per-token step size max(||z||_inf, eps) / q_max, snapped so that
// quantizing the output again reproduces the same step exactly.
double quantization_step(const Eigen::Ref<const Eigen::RowVectorXd>& z, const QuantConfig& cfg);

Eigen::RowVectorXd quantize(const Eigen::Ref<const Eigen::RowVectorXd>& z, const QuantConfig& cfg);

// Applies `quantize` to every row (token) independently.
Matrix quantize_rows(const Matrix& tokens, const QuantConfig& cfg);

// g = g_min + (1 - g_min) * logistic(alpha)
double gate_value(const GateState& state, const QuantConfig& cfg);
diff::Var gate_value(diff::Var alpha, const QuantConfig& cfg);

// Forward: quantize_rows(z). Backward: g·v into z and <v, z> into g, where g
// is the gate computed from `alpha`.
diff::Var ste_quantize(diff::Var tokens, const QuantConfig& cfg, diff::Var alpha);
// Fixed gate (g = 1 gives the plain straight-through estimator).
diff::Var ste_quantize(diff::Var tokens, const QuantConfig& cfg, double gate);

}  // namespace prefixq
