#pragma once

// Synthetic prompt-redundant control tasks. K tasks × R nuisance variants
// are encoded into distinct prefix latents; the expert trajectory depends on
// the task only.
//
// This is a stand-in for real vision-language-action benchmarks: prefixes are
// synthetic Gaussian embeddings and trajectories are minimum-jerk reaches.
//
// Task and nuisance ids are 0-based.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "prefixq/objective.hpp"
#include "prefixq/quotientlab.hpp"

namespace prefixq::synth {

struct TaskSpec {
  int n_tasks = 8;       // K
  int n_nuisances = 16;  // R
  int horizon = 8;       // T
  int action_dim = 2;    // D
  int prefix_tokens = 16;  // M
  int model_dim = 64;      // d
  // Rows [0, task_rows) carry the task signature, the rest the nuisance.
  int task_rows = 8;
  double nuisance_scale = 1.0;
  double obs_noise = 0.0;  // sigma_obs for evaluation copies
  double train_fraction = 0.75;
  double target_radius = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
  int train_nuisance_count() const;
  bool operator==(const TaskSpec&) const = default;
};

struct Episode {
  int task = 0;
  int nuisance = 0;
  PrefixLatent prefix;
  ActionChunk expert;
};

struct Dataset {
  TaskSpec spec;
  std::vector<Episode> train;
  std::vector<Episode> test;
  NormStats stats;
  std::vector<int> train_nuisances;
  std::vector<int> test_nuisances;
};

// Deterministic in (task, nuisance, spec.seed): a shared base, a task
// signature in the task rows, a nuisance pattern in the remaining rows, and
// a fixed random mixing of the model dimension.
PrefixLatent encode_prompt(int task, int nuisance, const TaskSpec& spec);

// Evaluation copy with additive N(0, sigma²) noise.
PrefixLatent noisy_copy(const PrefixLatent& prefix, double sigma, std::uint64_t seed);

Eigen::RowVectorXd task_target(int task, const TaskSpec& spec);

// 10s³ - 15s⁴ + 6s⁵, s = t/(T-1) for t = 0..T-1.
double minimum_jerk(double s);
ActionChunk expert_trajectory(int task, const TaskSpec& spec);

// Training uses the same subset of nuisance ids for every task; test uses
// the held-out ids.
Dataset generate_dataset(const TaskSpec& spec);

using Discretizer = std::function<std::string(const Episode&)>;

// Latent key = bytes of the task-signature rows.
Discretizer ideal_discretizer(const TaskSpec& spec);
// Latent key = (task, nuisance) pair, one latent per input.
Discretizer identity_discretizer();

// Inputs are (task, nuisance) pairs, trajectories are distinct expert
// chunks, joint is uniform over episodes.
quotient::DiscreteWorld world_from_dataset(const std::vector<Episode>& episodes, const Discretizer& discretizer);

// Dataset container (binary, little-endian):
//   magic "PQDATA\0\0", u32 version, spec fields, NormStats, train/test
//   nuisance ids, episodes, trailing FNV-1a 64 checksum of all prior bytes.
void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace prefixq::synth
