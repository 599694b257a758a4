#include "prefixq/synthtask.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include "prefixq/errors.hpp"
#include "prefixq/serialize.hpp"

namespace prefixq::synth {

namespace {

enum Stream : std::uint64_t { kBase = 1, kTask = 2, kNuisance = 3, kMixing = 4, kSplit = 5 };

constexpr std::string_view kDatasetMagic{"PQDATA\0\0", 8};
constexpr std::uint32_t kDatasetVersion = 1;

}  // namespace

void TaskSpec::validate() const {
  if (n_tasks < 2) throw InvalidArgument("task spec: need at least 2 tasks");
  if (n_nuisances < 2) throw InvalidArgument("task spec: need at least 2 nuisance variants");
  if (horizon < 3) throw InvalidArgument("task spec: horizon must be >= 3");
  if (action_dim < 1 || model_dim < 1) throw InvalidArgument("task spec: dimensions must be positive");
  if (task_rows < 1 || task_rows >= prefix_tokens) {
    throw InvalidArgument("task spec: task_rows must leave at least one nuisance row");
  }
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw InvalidArgument("task spec: train fraction in (0, 1)");
  if (!(obs_noise >= 0.0)) throw InvalidArgument("task spec: observation noise must be nonnegative");
  const int n = train_nuisance_count();
  if (n < 1 || n >= n_nuisances) {
    throw InvalidArgument("task spec: nuisance split leaves an empty train or test set");
  }
}

int TaskSpec::train_nuisance_count() const {
  return static_cast<int>(std::lround(train_fraction * n_nuisances));
}

PrefixLatent encode_prompt(int task, int nuisance, const TaskSpec& spec) {
  if (task < 0 || task >= spec.n_tasks) throw InvalidArgument("task id " + std::to_string(task) + " out of range");
  if (nuisance < 0 || nuisance >= spec.n_nuisances) {
    throw InvalidArgument("nuisance id " + std::to_string(nuisance) + " out of range");
  }
  const int M = spec.prefix_tokens;
  const int d = spec.model_dim;
  const int nuisance_rows = M - spec.task_rows;

  Rng base_rng(derive_seed(spec.seed, kBase));
  Matrix pre = random_normal(M, d, base_rng, 0.5);
  Rng task_rng(derive_seed(derive_seed(spec.seed, kTask), static_cast<std::uint64_t>(task)));
  pre.topRows(spec.task_rows) += random_normal(spec.task_rows, d, task_rng);
  Rng nuisance_rng(derive_seed(derive_seed(spec.seed, kNuisance), static_cast<std::uint64_t>(nuisance)));
  pre.bottomRows(nuisance_rows) += random_normal(nuisance_rows, d, nuisance_rng, spec.nuisance_scale);

  Rng mix_rng(derive_seed(spec.seed, kMixing));
  const Matrix mixing = random_normal(d, d, mix_rng, 1.0 / std::sqrt(static_cast<double>(d)));
  // Row blocks are mixed separately so the task rows never depend on the
  // nuisance rows, bit for bit.
  Matrix out(M, d);
  out.topRows(spec.task_rows) = pre.topRows(spec.task_rows) * mixing;
  out.bottomRows(nuisance_rows) = pre.bottomRows(nuisance_rows) * mixing;
  return out;
}

PrefixLatent noisy_copy(const PrefixLatent& prefix, double sigma, std::uint64_t seed) {
  if (sigma == 0.0) return prefix;
  Rng rng(seed);
  return prefix + random_normal(prefix.rows(), prefix.cols(), rng, sigma);
}

Eigen::RowVectorXd task_target(int task, const TaskSpec& spec) {
  Eigen::RowVectorXd target = Eigen::RowVectorXd::Zero(spec.action_dim);
  if (spec.action_dim == 1) {
    target(0) = spec.target_radius * (-1.0 + 2.0 * task / (spec.n_tasks - 1));
    return target;
  }
  const double theta = 2.0 * std::numbers::pi * task / spec.n_tasks;
  target(0) = spec.target_radius * std::cos(theta);
  target(1) = spec.target_radius * std::sin(theta);
  return target;
}

double minimum_jerk(double s) {
  const double s3 = s * s * s;
  return 10.0 * s3 - 15.0 * s3 * s + 6.0 * s3 * s * s;
}

ActionChunk expert_trajectory(int task, const TaskSpec& spec) {
  if (task < 0 || task >= spec.n_tasks) throw InvalidArgument("task id " + std::to_string(task) + " out of range");
  const Eigen::RowVectorXd target = task_target(task, spec);
  ActionChunk chunk(spec.horizon, spec.action_dim);
  for (int t = 0; t < spec.horizon; ++t) {
    chunk.row(t) = minimum_jerk(static_cast<double>(t) / (spec.horizon - 1)) * target;
  }
  return chunk;
}

Dataset generate_dataset(const TaskSpec& spec) {
  spec.validate();
  Dataset data;
  data.spec = spec;

  std::vector<int> order(static_cast<std::size_t>(spec.n_nuisances));
  for (int i = 0; i < spec.n_nuisances; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng split_rng(derive_seed(spec.seed, kSplit));
  for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[split_rng.index(i + 1)]);
  const auto n_train = static_cast<std::size_t>(spec.train_nuisance_count());
  data.train_nuisances.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  data.test_nuisances.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(data.train_nuisances.begin(), data.train_nuisances.end());
  std::sort(data.test_nuisances.begin(), data.test_nuisances.end());

  for (int task = 0; task < spec.n_tasks; ++task) {
    const ActionChunk expert = expert_trajectory(task, spec);
    for (int n : data.train_nuisances) data.train.push_back({task, n, encode_prompt(task, n, spec), expert});
    for (int n : data.test_nuisances) data.test.push_back({task, n, encode_prompt(task, n, spec), expert});
  }

  std::vector<ActionChunk> actions;
  actions.reserve(data.train.size());
  for (const Episode& e : data.train) actions.push_back(e.expert);
  data.stats = NormStats::from_actions(actions);
  return data;
}

Discretizer ideal_discretizer(const TaskSpec& spec) {
  const int rows = spec.task_rows;
  return [rows](const Episode& e) { return quotient::canonical_bytes(e.prefix.topRows(rows)); };
}

Discretizer identity_discretizer() {
  return [](const Episode& e) { return std::to_string(e.task) + "/" + std::to_string(e.nuisance); };
}

quotient::DiscreteWorld world_from_dataset(const std::vector<Episode>& episodes, const Discretizer& discretizer) {
  if (episodes.empty()) throw InvalidArgument("world_from_dataset: no episodes");
  quotient::DiscreteWorld world;
  std::map<std::string, int> latent_ids;
  std::map<std::string, int> trajectory_ids;
  std::vector<int> trajectory_of;
  for (const Episode& e : episodes) {
    world.inputs.push_back("t" + std::to_string(e.task) + "/n" + std::to_string(e.nuisance));
    auto [lat, new_latent] = latent_ids.emplace(discretizer(e), static_cast<int>(latent_ids.size()));
    world.latent_of.push_back(lat->second);
    auto [traj, new_traj] =
        trajectory_ids.emplace(quotient::canonical_bytes(e.expert), static_cast<int>(trajectory_ids.size()));
    if (new_traj) world.trajectories.push_back("traj" + std::to_string(traj->second));
    trajectory_of.push_back(traj->second);
  }
  const auto n = static_cast<Eigen::Index>(episodes.size());
  world.joint = Matrix::Zero(n, static_cast<Eigen::Index>(world.trajectories.size()));
  for (Eigen::Index i = 0; i < n; ++i) world.joint(i, trajectory_of[static_cast<std::size_t>(i)]) = 1.0 / n;
  return world;
}

namespace {

void write_spec(io::Writer& w, const TaskSpec& s) {
  w.i32(s.n_tasks);
  w.i32(s.n_nuisances);
  w.i32(s.horizon);
  w.i32(s.action_dim);
  w.i32(s.prefix_tokens);
  w.i32(s.model_dim);
  w.i32(s.task_rows);
  w.f64(s.nuisance_scale);
  w.f64(s.obs_noise);
  w.f64(s.train_fraction);
  w.f64(s.target_radius);
  w.u64(s.seed);
}

TaskSpec read_spec(io::Reader& r) {
  TaskSpec s;
  s.n_tasks = r.i32();
  s.n_nuisances = r.i32();
  s.horizon = r.i32();
  s.action_dim = r.i32();
  s.prefix_tokens = r.i32();
  s.model_dim = r.i32();
  s.task_rows = r.i32();
  s.nuisance_scale = r.f64();
  s.obs_noise = r.f64();
  s.train_fraction = r.f64();
  s.target_radius = r.f64();
  s.seed = r.u64();
  return s;
}

void write_episodes(io::Writer& w, const std::vector<Episode>& eps) {
  w.u64(eps.size());
  for (const Episode& e : eps) {
    w.i32(e.task);
    w.i32(e.nuisance);
    w.matrix(e.prefix);
    w.matrix(e.expert);
  }
}

std::vector<Episode> read_episodes(io::Reader& r) {
  const std::uint64_t n = r.u64();
  std::vector<Episode> eps;
  for (std::uint64_t i = 0; i < n; ++i) {
    Episode e;
    e.task = r.i32();
    e.nuisance = r.i32();
    e.prefix = r.matrix();
    e.expert = r.matrix();
    eps.push_back(std::move(e));
  }
  return eps;
}

void write_ids(io::Writer& w, const std::vector<int>& ids) {
  w.u64(ids.size());
  for (int v : ids) w.i32(v);
}

std::vector<int> read_ids(io::Reader& r) {
  const std::uint64_t n = r.u64();
  std::vector<int> ids;
  for (std::uint64_t i = 0; i < n; ++i) ids.push_back(r.i32());
  return ids;
}

}  // namespace

void save_dataset(const Dataset& data, const std::string& path) {
  io::Writer w(kDatasetMagic, kDatasetVersion);
  write_spec(w, data.spec);
  w.row(data.stats.lower);
  w.row(data.stats.upper);
  write_ids(w, data.train_nuisances);
  write_ids(w, data.test_nuisances);
  write_episodes(w, data.train);
  write_episodes(w, data.test);
  w.save(path);
}

Dataset load_dataset(const std::string& path) {
  io::Reader r = io::Reader::open(path, kDatasetMagic, kDatasetVersion, "dataset");
  Dataset data;
  data.spec = read_spec(r);
  data.stats.lower = r.row();
  data.stats.upper = r.row();
  data.train_nuisances = read_ids(r);
  data.test_nuisances = read_ids(r);
  data.train = read_episodes(r);
  data.test = read_episodes(r);
  r.expect_end();
  data.spec.validate();
  data.stats.validate();
  return data;
}

}  // namespace prefixq::synth
