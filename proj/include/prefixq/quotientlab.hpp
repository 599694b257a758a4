#pragma once

// Finite-world oracles for the action-induced quotient: Bayes-optimal action
// laws per latent, the quotient partition and its sufficiency/minimality,
// the empirical action-sensitive complexity, and an exact injectivity check.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "prefixq/tensor.hpp"

namespace prefixq::quotient {

// Finite joint distribution over (input, trajectory) with a latent map.
struct DiscreteWorld {
  std::vector<std::string> inputs;
  std::vector<int> latent_of;  // one entry per input
  std::vector<std::string> trajectories;
  Matrix joint;                // inputs × trajectories, sums to 1

  // Throws InvalidArgument describing the first violated invariant.
  void validate(double tol = 1e-9) const;
  std::size_t n_inputs() const { return inputs.size(); }
  std::size_t n_trajectories() const { return trajectories.size(); }
};

// Distribution over trajectory ids.
using ActionLaw = std::vector<double>;
using LawMap = std::map<int, ActionLaw>;
// latent id → class id
using Partition = std::map<int, int>;

constexpr double kDefaultTolerance = 1e-9;

double total_variation(const ActionLaw& p, const ActionLaw& q);

// P(A | latent) for every latent in the support.
LawMap bayes_law(const DiscreteWorld& world);

// Latents share a class iff their laws lie within `tol` (total variation) of
// the class representative, the first latent (in id order) placed there.
Partition build_quotient(const LawMap& laws, double tol = kDefaultTolerance);

std::size_t class_count(const Partition& partition);
std::map<int, std::vector<int>> classes_of(const Partition& partition);

// Decoder well-defined: every pair of laws inside a class within tol.
bool check_sufficiency(const Partition& partition, const LawMap& laws, double tol = kDefaultTolerance);

// Merging any two distinct classes breaks sufficiency.
bool check_minimality(const Partition& partition, const LawMap& laws, double tol = kDefaultTolerance);

// Every fiber of `fine` lies inside a single class of `coarse`.
bool refines(const Partition& fine, const Partition& coarse);

// Decoder from a partition: class id → representative law.
std::map<int, ActionLaw> quotient_decoder(const Partition& partition, const LawMap& laws);

// Predictors evaluated on the sample: outputs[f][i] is f(x_i), a T×D array.
struct FunctionClass {
  std::vector<std::vector<Matrix>> outputs;

  void validate() const;
  std::size_t size() const { return outputs.size(); }
  std::size_t n_inputs() const { return outputs.empty() ? 0 : outputs.front().size(); }
};

// (1/T) Σ_t <u_t, v_t>
double trajectory_inner(const Matrix& u, const Matrix& v);
// sqrt(<v, v>_T)
double trajectory_norm(const Matrix& v);

struct ComplexityEstimate {
  double estimate = 0.0;           // sqrt(T) · mean over draws
  std::vector<double> per_draw;    // sup over the class, per draw
};

// Rademacher signs for draw `k` depend only on (seed, k), so classes
// evaluated with the same seed see the same sign arrays.
ComplexityEstimate estimate_action_complexity(const FunctionClass& fc, std::size_t n_draws, std::uint64_t seed);

// All pairs (i, j), i < j, whose encodings are byte-identical after
// canonicalizing signed zeros.
using Encoder = std::function<Matrix(std::size_t index)>;
std::vector<std::pair<std::size_t, std::size_t>> check_injectivity(const Encoder& encoder, std::size_t n_inputs);
std::vector<std::pair<std::size_t, std::size_t>> check_injectivity(const std::vector<Matrix>& encodings);

std::string canonical_bytes(const Matrix& m);

// World file (JSON):
//   {"format": "prefixq-world", "version": 1,
//    "inputs": [names], "latent_of": [ints], "trajectories": [names],
//    "joint": [[row per input]]}
DiscreteWorld read_world(const std::string& path);
void write_world(const DiscreteWorld& world, const std::string& path);
DiscreteWorld world_from_json_text(const std::string& text);
std::string world_to_json_text(const DiscreteWorld& world);

// Everything quotient-verify reports about one world.
struct QuotientSummary {
  std::size_t n_latents = 0;
  std::size_t n_classes = 0;
  bool sufficient = false;
  bool minimal = false;
  bool round_trip = false;  // decoder(quotient(h)) reproduces every law
  Partition partition;
};

QuotientSummary summarize_quotient(const DiscreteWorld& world, double tol = kDefaultTolerance);

}  // namespace prefixq::quotient
