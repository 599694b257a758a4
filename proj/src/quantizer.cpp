#include "prefixq/quantizer.hpp"

#include <cmath>
#include <string>

#include "prefixq/errors.hpp"

namespace prefixq {

int QuantConfig::q_max() const { return (1 << (bits - 1)) - 1; }

void QuantConfig::validate() const {
  if (bits < 2 || bits > 30) throw InvalidArgument("quantizer bits must be in [2, 30], got " + std::to_string(bits));
  if (!(g_min > 0.0 && g_min <= 1.0)) throw InvalidArgument("g_min must be in (0, 1]");
  if (!(scale_epsilon > 0.0)) throw InvalidArgument("scale_epsilon must be positive");
}

double round_half_even(double x) {
  const double r = std::round(x);  // half away from zero
  if (std::abs(x - std::trunc(x)) == 0.5) return 2.0 * std::round(x / 2.0);
  return r;
}

double quantization_step(const Eigen::Ref<const Eigen::RowVectorXd>& z, const QuantConfig& cfg) {
  const double q = cfg.q_max();
  const double m = z.size() == 0 ? 0.0 : z.cwiseAbs().maxCoeff();
  double s = std::max(m, cfg.scale_epsilon) / q;
  // The max coordinate of the output is q·s. Re-quantizing recomputes
  // (q·s)/q, which need not round back to s; iterate to a fixed point.
  for (int i = 0; i < 8; ++i) {
    if (m < cfg.scale_epsilon) break;
    const double next = (q * s) / q;
    if (next == s) break;
    s = next;
  }
  return s;
}

Eigen::RowVectorXd quantize(const Eigen::Ref<const Eigen::RowVectorXd>& z, const QuantConfig& cfg) {
  if (!z.allFinite()) throw NonFinite("quantize: non-finite input");
  const double q = cfg.q_max();
  const double s = quantization_step(z, cfg);
  Eigen::RowVectorXd out(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double k = std::clamp(round_half_even(z(i) / s), -q, q);
    out(i) = s * k;
  }
  return out;
}

Matrix quantize_rows(const Matrix& tokens, const QuantConfig& cfg) {
  Matrix out(tokens.rows(), tokens.cols());
  for (Eigen::Index r = 0; r < tokens.rows(); ++r) out.row(r) = quantize(tokens.row(r), cfg);
  return out;
}

double gate_value(const GateState& state, const QuantConfig& cfg) {
  const double a = state.alpha;
  const double logistic = a >= 0 ? 1.0 / (1.0 + std::exp(-a)) : std::exp(a) / (1.0 + std::exp(a));
  return cfg.g_min + (1.0 - cfg.g_min) * logistic;
}

diff::Var gate_value(diff::Var alpha, const QuantConfig& cfg) {
  return diff::affine(diff::sigmoid(alpha), 1.0 - cfg.g_min, cfg.g_min);
}

diff::Var ste_quantize(diff::Var tokens, const QuantConfig& cfg, diff::Var alpha) {
  return diff::scaled_straight_through([cfg](const Matrix& z) { return quantize_rows(z, cfg); },
                                       gate_value(alpha, cfg), tokens);
}

diff::Var ste_quantize(diff::Var tokens, const QuantConfig& cfg, double gate) {
  return diff::scaled_straight_through([cfg](const Matrix& z) { return quantize_rows(z, cfg); }, gate, tokens);
}

}  // namespace prefixq
