#include "prefixq/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "prefixq/errors.hpp"

namespace prefixq::diff {

namespace {

void require_same_tape(Var a, Var b, const char* op) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape()) {
    throw InvalidArgument(std::string(op) + ": operands belong to different tapes");
  }
}

void require_same_shape(Var a, Var b, const char* op) {
  require_same_tape(a, b, op);
  if (a.shape() != b.shape()) {
    throw ShapeMismatch(std::string(op) + ": " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

void require_scalar(Var s, const char* op) {
  if (s.rows() != 1 || s.cols() != 1) {
    throw ShapeMismatch(std::string(op) + ": expected 1x1 scalar, got " + to_string(s.shape()));
  }
}

void require_row(Var x, Var row, const char* op) {
  require_same_tape(x, row, op);
  if (row.rows() != 1 || row.cols() != x.cols()) {
    throw ShapeMismatch(std::string(op) + ": row " + to_string(row.shape()) + " does not broadcast over " +
                        to_string(x.shape()));
  }
}

Matrix one_by_one(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return m;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

const Matrix& Var::value() const {
  if (!tape_) throw InvalidArgument("use of an unbound Var");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

Var Tape::constant(Matrix value) { return push_impl("constant", std::move(value), nullptr, nullptr, nullptr); }

Var Tape::leaf(Matrix value) {
  Var v = push_impl("leaf", std::move(value), nullptr, nullptr, nullptr);
  nodes_.back().requires_grad = true;
  return v;
}

Var Tape::push(const char* op, Matrix value, std::initializer_list<Var> parents, Backward fn) {
  return push_impl(op, std::move(value), parents.begin(), parents.end(), std::move(fn));
}

Var Tape::push(const char* op, Matrix value, const std::vector<Var>& parents, Backward fn) {
  return push_impl(op, std::move(value), parents.data(), parents.data() + parents.size(), std::move(fn));
}

Var Tape::push_impl(const char* op, Matrix value, const Var* first, const Var* last, Backward fn) {
  if (!value.allFinite()) throw NonFinite(std::string("non-finite value produced by primitive '") + op + "'");
  bool needs = false;
  for (const Var* it = first; it != last; ++it) {
    const Var& p = *it;
    if (p.tape() != this) throw InvalidArgument(std::string(op) + ": parent from another tape");
    needs = needs || p.requires_grad();
  }
  Node node{op, std::move(value), Matrix(), needs, false, needs ? std::move(fn) : Backward()};
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::accumulate(Var target, const Matrix& contribution) {
  Node& n = nodes_[static_cast<std::size_t>(target.id())];
  if (!n.requires_grad) return;
  if (n.has_grad) {
    n.grad += contribution;
  } else {
    n.grad = contribution;
    n.has_grad = true;
  }
}

void Tape::backward(Var out) {
  if (out.tape() != this) throw InvalidArgument("backward: Var from another tape");
  require_scalar(out, "backward");
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  accumulate(out, one_by_one(1.0));
  for (int i = out.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.has_grad || !n.backward) continue;
    if (!n.grad.allFinite()) {
      throw NonFinite(std::string("non-finite cotangent reaching primitive '") + n.op + "'");
    }
    n.backward(*this, n.grad);
  }
}

bool Tape::has_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id())].has_grad; }

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (n.has_grad) return n.grad;
  return Matrix::Zero(n.value.rows(), n.value.cols());
}

void Tape::set_freeze(FreezeMode mode, std::vector<Matrix>* store) {
  if (mode != FreezeMode::kOff && store == nullptr) throw InvalidArgument("freeze mode needs a store");
  freeze_mode_ = mode;
  frozen_ = store;
  frozen_cursor_ = 0;
  if (mode == FreezeMode::kRecord) frozen_->clear();
}

const Matrix* Tape::frozen_site(const Matrix& value_at_base) {
  ++surrogate_count_;
  switch (freeze_mode_) {
    case FreezeMode::kOff:
      return nullptr;
    case FreezeMode::kRecord:
      frozen_->push_back(value_at_base);
      return nullptr;
    case FreezeMode::kReplay: {
      if (frozen_cursor_ >= frozen_->size()) throw InvalidArgument("replay: more surrogate sites than recorded");
      const Matrix& v = (*frozen_)[frozen_cursor_++];
      if (shape_of(v) != shape_of(value_at_base)) throw ShapeMismatch("replay: surrogate site shape changed");
      return &v;
    }
  }
  return nullptr;
}

// ---------------------------------------------------------------------------

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  return a.tape()->push("add", a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  return a.tape()->push("sub", a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  return a.tape()->push("mul", a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (a.requires_grad()) t.accumulate(a, g.cwiseProduct(b.value()));
    if (b.requires_grad()) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var add_row(Var x, Var row) {
  require_row(x, row, "add_row");
  Matrix out = x.value().rowwise() + row.value().row(0);
  return x.tape()->push("add_row", std::move(out), {x, row}, [x, row](Tape& t, const Matrix& g) {
    t.accumulate(x, g);
    if (row.requires_grad()) t.accumulate(row, g.colwise().sum());
  });
}

Var mul_row(Var x, Var row) {
  require_row(x, row, "mul_row");
  Matrix out = x.value().array().rowwise() * row.value().row(0).array();
  return x.tape()->push("mul_row", std::move(out), {x, row}, [x, row](Tape& t, const Matrix& g) {
    if (x.requires_grad()) {
      Matrix gx = g.array().rowwise() * row.value().row(0).array();
      t.accumulate(x, gx);
    }
    if (row.requires_grad()) t.accumulate(row, g.cwiseProduct(x.value()).colwise().sum());
  });
}

Var scale(Var x, double s) {
  return x.tape()->push("scale", s * x.value(), {x}, [x, s](Tape& t, const Matrix& g) { t.accumulate(x, s * g); });
}

Var scale(Var x, Var s) {
  require_same_tape(x, s, "scale");
  require_scalar(s, "scale");
  return x.tape()->push("scale", s.value()(0, 0) * x.value(), {x, s}, [x, s](Tape& t, const Matrix& g) {
    if (x.requires_grad()) t.accumulate(x, s.value()(0, 0) * g);
    if (s.requires_grad()) t.accumulate(s, one_by_one(g.cwiseProduct(x.value()).sum()));
  });
}

Var affine(Var x, double a, double b) {
  Matrix out = (a * x.value()).array() + b;
  return x.tape()->push("affine", std::move(out), {x}, [x, a](Tape& t, const Matrix& g) { t.accumulate(x, a * g); });
}

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeMismatch("matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  Matrix out = a.value() * b.value();
  return a.tape()->push("matmul", std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (a.requires_grad()) t.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) t.accumulate(b, a.value().transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  require_same_tape(a, b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw ShapeMismatch("matmul_nt: " + to_string(a.shape()) + " x " + to_string(b.shape()) + "^T");
  }
  Matrix out = a.value() * b.value().transpose();
  return a.tape()->push("matmul_nt", std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (a.requires_grad()) t.accumulate(a, g * b.value());
    if (b.requires_grad()) t.accumulate(b, g.transpose() * a.value());
  });
}

Var tanh(Var x) {
  Matrix out = x.value().array().tanh();
  Tape* tape = x.tape();
  const int self = static_cast<int>(tape->size());
  return tape->push("tanh", std::move(out), {x}, [x, self](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(self);
    Matrix gx = g.array() * (1.0 - y.array().square());
    t.accumulate(x, gx);
  });
}

Var gelu(Var x) {
  const Matrix& v = x.value();
  Matrix out(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double z = v.data()[i];
    out.data()[i] = 0.5 * z * (1.0 + std::tanh(kGeluC * (z + kGeluA * z * z * z)));
  }
  return x.tape()->push("gelu", std::move(out), {x}, [x](Tape& t, const Matrix& g) {
    const Matrix& v = x.value();
    Matrix gx(v.rows(), v.cols());
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double z = v.data()[i];
      const double u = kGeluC * (z + kGeluA * z * z * z);
      const double th = std::tanh(u);
      const double du = kGeluC * (1.0 + 3.0 * kGeluA * z * z);
      gx.data()[i] = g.data()[i] * (0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * du);
    }
    t.accumulate(x, gx);
  });
}

Var sigmoid(Var x) {
  const Matrix& v = x.value();
  Matrix out(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double z = v.data()[i];
    out.data()[i] = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  Tape* tape = x.tape();
  const int self = static_cast<int>(tape->size());
  return tape->push("sigmoid", std::move(out), {x}, [x, self](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(self);
    Matrix gx = g.array() * y.array() * (1.0 - y.array());
    t.accumulate(x, gx);
  });
}

Var relu(Var x) {
  Matrix out = x.value().cwiseMax(0.0);
  return x.tape()->push("relu", std::move(out), {x}, [x](Tape& t, const Matrix& g) {
    Matrix gx = (x.value().array() > 0.0).select(g, 0.0);
    t.accumulate(x, gx);
  });
}

Var softmax_rows(Var x) {
  const Matrix& v = x.value();
  Matrix out(v.rows(), v.cols());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const double m = v.row(r).maxCoeff();
    out.row(r) = (v.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  Tape* tape = x.tape();
  const int self = static_cast<int>(tape->size());
  return tape->push("softmax_rows", std::move(out), {x}, [x, self](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(self);
    Matrix gx(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = g.row(r).dot(y.row(r));
      gx.row(r) = y.row(r).array() * (g.row(r).array() - dot);
    }
    t.accumulate(x, gx);
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  require_row(x, gamma, "layer_norm");
  require_row(x, beta, "layer_norm");
  const Matrix& v = x.value();
  const Eigen::Index n = v.cols();
  Matrix xhat(v.rows(), n);
  Eigen::VectorXd inv_std(v.rows());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const double mu = v.row(r).mean();
    const double var = (v.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (v.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return x.tape()->push(
      "layer_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), n](Tape& t, const Matrix& g) {
        if (gamma.requires_grad()) t.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
        if (beta.requires_grad()) t.accumulate(beta, g.colwise().sum());
        if (!x.requires_grad()) return;
        Matrix dxhat = g.array().rowwise() * gamma.value().row(0).array();
        Matrix gx(g.rows(), n);
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          const double m1 = dxhat.row(r).mean();
          const double m2 = dxhat.row(r).dot(xhat.row(r)) / static_cast<double>(n);
          gx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
        }
        t.accumulate(x, gx);
      });
}

Var sum(Var x) {
  return x.tape()->push("sum", one_by_one(x.value().sum()), {x}, [x](Tape& t, const Matrix& g) {
    t.accumulate(x, Matrix::Constant(x.rows(), x.cols(), g(0, 0)));
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  return x.tape()->push("mean", one_by_one(x.value().sum() / n), {x}, [x, n](Tape& t, const Matrix& g) {
    t.accumulate(x, Matrix::Constant(x.rows(), x.cols(), g(0, 0) / n));
  });
}

Var mean_rows(Var x) {
  const double n = static_cast<double>(x.rows());
  Matrix out = x.value().colwise().sum() / n;
  return x.tape()->push("mean_rows", std::move(out), {x}, [x, n](Tape& t, const Matrix& g) {
    Matrix gx = (g / n).replicate(x.rows(), 1);
    t.accumulate(x, gx);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_cols: no operands");
  Tape* tape = parts.front().tape();
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.tape() != tape) throw InvalidArgument("concat_cols: operands belong to different tapes");
    if (p.rows() != rows) throw ShapeMismatch("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return tape->push("concat_cols", std::move(out), parts, [parts](Tape& t, const Matrix& g) {
    Eigen::Index c = 0;
    for (const Var& p : parts) {
      if (p.requires_grad()) t.accumulate(p, g.middleCols(c, p.cols()));
      c += p.cols();
    }
  });
}

Var slice_cols(Var x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > x.cols()) throw ShapeMismatch("slice_cols: range out of bounds");
  Matrix out = x.value().middleCols(start, count);
  return x.tape()->push("slice_cols", std::move(out), {x}, [x, start, count](Tape& t, const Matrix& g) {
    Matrix gx = Matrix::Zero(x.rows(), x.cols());
    gx.middleCols(start, count) = g;
    t.accumulate(x, gx);
  });
}

Var slice_rows(Var x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > x.rows()) throw ShapeMismatch("slice_rows: range out of bounds");
  Matrix out = x.value().middleRows(start, count);
  return x.tape()->push("slice_rows", std::move(out), {x}, [x, start, count](Tape& t, const Matrix& g) {
    Matrix gx = Matrix::Zero(x.rows(), x.cols());
    gx.middleRows(start, count) = g;
    t.accumulate(x, gx);
  });
}

Var reshape(Var x, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != x.value().size()) throw ShapeMismatch("reshape: element count changes");
  Matrix out = Eigen::Map<const Matrix>(x.value().data(), rows, cols);
  return x.tape()->push("reshape", std::move(out), {x}, [x](Tape& t, const Matrix& g) {
    Matrix gx = Eigen::Map<const Matrix>(g.data(), x.rows(), x.cols());
    t.accumulate(x, gx);
  });
}

Var stop_gradient(Var x) {
  Tape* tape = x.tape();
  const Matrix* frozen = tape->frozen_site(x.value());
  return tape->constant(frozen ? *frozen : x.value());
}

Var scaled_straight_through(const ForwardFn& forward, Var gate, Var x) {
  require_same_tape(gate, x, "scaled_straight_through");
  require_scalar(gate, "scaled_straight_through");
  Tape* tape = x.tape();
  Matrix fx = forward(x.value());
  if (shape_of(fx) != x.shape()) throw ShapeMismatch("scaled_straight_through: forward_fn changed the shape");
  const double g = gate.value()(0, 0);
  // Residual sg(f(x) - g·x) as seen at the base point.
  const Matrix* frozen = tape->frozen_site(fx - g * x.value());
  Matrix out = frozen ? Matrix(*frozen + g * x.value()) : std::move(fx);
  return tape->push("scaled_straight_through", std::move(out), {gate, x}, [gate, x](Tape& t, const Matrix& v) {
    if (x.requires_grad()) t.accumulate(x, gate.value()(0, 0) * v);
    if (gate.requires_grad()) t.accumulate(gate, one_by_one(v.cwiseProduct(x.value()).sum()));
  });
}

Var scaled_straight_through(const ForwardFn& forward, double gate, Var x) {
  return scaled_straight_through(forward, x.tape()->constant(one_by_one(gate)), x);
}

// ---------------------------------------------------------------------------

namespace {

VarMap register_leaves(Tape& tape, const ParamSet& params) {
  VarMap vars;
  for (const auto& [name, value] : params) vars.emplace(name, tape.leaf(value));
  return vars;
}

double run_scalar(const LossFn& loss_fn, const ParamSet& params, FreezeMode mode, std::vector<Matrix>* store) {
  Tape tape;
  tape.set_freeze(mode, store);
  VarMap vars;
  for (const auto& [name, value] : params) vars.emplace(name, tape.constant(value));
  Var out = loss_fn(tape, vars);
  require_scalar(out, "loss_fn");
  return out.value()(0, 0);
}

double relative_error(double a, double f, double floor) {
  return std::abs(a - f) / std::max({std::abs(a), std::abs(f), floor});
}

}  // namespace

ValueAndGrad value_and_grad(const LossFn& loss_fn, const ParamSet& params) {
  Tape tape;
  VarMap vars = register_leaves(tape, params);
  Var out = loss_fn(tape, vars);
  require_scalar(out, "loss_fn");
  tape.backward(out);
  ValueAndGrad result;
  result.value = out.value()(0, 0);
  for (const auto& [name, v] : vars) result.grad.add(name, tape.grad(v));
  return result;
}

double evaluate(const LossFn& loss_fn, const ParamSet& params, FreezeMode mode, std::vector<Matrix>* store) {
  return run_scalar(loss_fn, params, mode, store);
}

FdReport finite_difference_check(const LossFn& loss_fn, const ParamSet& params, const FdOptions& options) {
  if (!(options.step > 0.0)) throw InvalidArgument("finite_difference_check: step must be positive");

  FdReport report;
  std::vector<Matrix> frozen;
  ValueAndGrad analytic;
  {
    Tape tape;
    tape.set_freeze(FreezeMode::kRecord, &frozen);
    VarMap vars = register_leaves(tape, params);
    Var out = loss_fn(tape, vars);
    require_scalar(out, "loss_fn");
    tape.backward(out);
    analytic.value = out.value()(0, 0);
    for (const auto& [name, v] : vars) analytic.grad.add(name, tape.grad(v));
    report.surrogate_sites = tape.surrogate_sites();
  }

  Rng rng(options.seed);
  const double h = options.step;
  ParamSet probe = params;

  auto central = [&](const std::string& name, const Matrix& direction, FreezeMode mode) {
    const Matrix& base = params.at(name);
    probe.assign(name, base + h * direction);
    const double plus = run_scalar(loss_fn, probe, mode, &frozen);
    probe.assign(name, base - h * direction);
    const double minus = run_scalar(loss_fn, probe, mode, &frozen);
    probe.assign(name, base);
    return (plus - minus) / (2.0 * h);
  };

  for (const auto& [name, base] : params) {
    const Matrix& grad = analytic.grad.at(name);
    std::vector<Matrix> directions;
    if (static_cast<std::size_t>(base.size()) <= options.max_coordinates) {
      for (Eigen::Index i = 0; i < base.size(); ++i) {
        Matrix e = Matrix::Zero(base.rows(), base.cols());
        e.data()[i] = 1.0;
        directions.push_back(std::move(e));
      }
    } else {
      for (std::size_t k = 0; k < options.probes; ++k) {
        Matrix u = random_normal(base.rows(), base.cols(), rng);
        u /= u.norm();
        directions.push_back(std::move(u));
      }
    }
    bool flagged = false;
    for (const Matrix& u : directions) {
      const double a = grad.cwiseProduct(u).sum();
      const double f = central(name, u, FreezeMode::kReplay);
      const double err = relative_error(a, f, options.denominator_floor);
      ++report.comparisons;
      if (err >= report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_parameter = name;
      }
      if (options.compare_unfrozen && report.surrogate_sites > 0 && !flagged) {
        const double raw = central(name, u, FreezeMode::kOff);
        if (relative_error(a, raw, options.denominator_floor) > options.tolerance && err <= options.tolerance) {
          flagged = true;
        }
      }
    }
    if (flagged) report.surrogate_flagged.push_back(name);
  }
  report.passed = report.max_relative_error < options.tolerance;
  return report;
}

}  // namespace prefixq::diff
