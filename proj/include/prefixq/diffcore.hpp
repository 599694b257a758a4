#pragma once

// Tensor-level reverse-mode differentiation.
//
// A Tape records every primitive applied to its Vars. `backward` walks the
// record in reverse and accumulates cotangents into nodes that require a
// gradient. Two primitives alter the derivative rule on purpose:
//
//   stop_gradient(x)                 forward identity, pullback 0
//   scaled_straight_through(f, g, x) forward f(x), pullback g·v into x and
//                                    <v, x> into g
//
// The second is the derivative of sg(f(x) - g·x) + g·x, computed without
// forming that sum so the forward value is f(x) bit-for-bit.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "prefixq/tensor.hpp"

namespace prefixq::diff {

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while the Tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Shape shape() const { return shape_of(value()); }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

// How stop-gradient sites behave. The finite-difference oracle records the
// values produced at a base point and replays them at perturbed points, so
// the oracle differentiates the same surrogate that backward() does.
enum class FreezeMode { kOff, kRecord, kReplay };

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& cotangent)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var leaf(Matrix value);

  // Appends a node. `fn` is only kept when some parent requires a gradient.
  // Throws NonFinite naming `op` if `value` has a non-finite entry.
  Var push(const char* op, Matrix value, std::initializer_list<Var> parents, Backward fn);
  Var push(const char* op, Matrix value, const std::vector<Var>& parents, Backward fn);

  // Seeds d(out)/d(out) = 1; `out` must be 1×1.
  void backward(Var out);

  // Accumulates into `target` if it requires a gradient.
  void accumulate(Var target, const Matrix& contribution);

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  bool has_grad(Var v) const;
  // Zero array when no cotangent reached `v`.
  Matrix grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }

  void set_freeze(FreezeMode mode, std::vector<Matrix>* store);
  FreezeMode freeze_mode() const { return freeze_mode_; }
  // Called by surrogate primitives; returns the replayed value in kReplay mode.
  const Matrix* frozen_site(const Matrix& value_at_base);
  std::size_t surrogate_sites() const { return surrogate_count_; }

 private:
  struct Node {
    const char* op;
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };

  Var push_impl(const char* op, Matrix value, const Var* first, const Var* last, Backward fn);

  std::vector<Node> nodes_;
  FreezeMode freeze_mode_ = FreezeMode::kOff;
  std::vector<Matrix>* frozen_ = nullptr;
  std::size_t frozen_cursor_ = 0;
  std::size_t surrogate_count_ = 0;
};

// Elementwise / structural primitives. Binary ops require equal shapes
// except where noted.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);                     // Hadamard
Var add_row(Var x, Var row);               // broadcast 1×c over rows of x
Var mul_row(Var x, Var row);               // broadcast 1×c over rows of x
Var scale(Var x, double s);
Var scale(Var x, Var s);                   // s is 1×1
Var affine(Var x, double a, double b);     // a·x + b
Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);               // a · bᵀ
Var tanh(Var x);
Var gelu(Var x);                           // tanh approximation
Var sigmoid(Var x);
Var relu(Var x);
Var softmax_rows(Var x);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var sum(Var x);                            // → 1×1
Var mean(Var x);                           // → 1×1
Var mean_rows(Var x);                      // → 1×c
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(Var x, Eigen::Index start, Eigen::Index count);
Var slice_rows(Var x, Eigen::Index start, Eigen::Index count);
Var reshape(Var x, Eigen::Index rows, Eigen::Index cols);

Var stop_gradient(Var x);

using ForwardFn = std::function<Matrix(const Matrix&)>;
Var scaled_straight_through(const ForwardFn& forward, Var gate, Var x);
Var scaled_straight_through(const ForwardFn& forward, double gate, Var x);

using VarMap = std::map<std::string, Var>;
using LossFn = std::function<Var(Tape&, const VarMap&)>;

struct ValueAndGrad {
  double value = 0.0;
  GradSet grad;
};

// Registers every entry of `params` as a leaf, evaluates `loss_fn`, and
// returns the exact reverse-mode gradient of the recorded computation.
ValueAndGrad value_and_grad(const LossFn& loss_fn, const ParamSet& params);

// Forward only.
double evaluate(const LossFn& loss_fn, const ParamSet& params,
                FreezeMode mode = FreezeMode::kOff, std::vector<Matrix>* store = nullptr);

struct FdOptions {
  double step = 1e-5;
  double tolerance = 1e-6;
  // Tensors up to this many scalars are checked coordinate-wise; larger ones
  // along `probes` random unit directions.
  std::size_t max_coordinates = 64;
  std::size_t probes = 6;
  // Relative error is |a - f| / max(|a|, |f|, denominator_floor).
  double denominator_floor = 1e-3;
  std::uint64_t seed = 0;
  // Also difference the unfrozen function and flag tensors whose true
  // derivative disagrees with the declared surrogate.
  bool compare_unfrozen = true;
};

struct FdReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t comparisons = 0;
  std::size_t surrogate_sites = 0;
  // Parameters where plain central differences disagree with the analytic
  // gradient while the surrogate-frozen differences agree.
  std::vector<std::string> surrogate_flagged;
  bool passed = false;
};

FdReport finite_difference_check(const LossFn& loss_fn, const ParamSet& params,
                                 const FdOptions& options = {});

}  // namespace prefixq::diff
