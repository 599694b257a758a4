#include "prefixq/quotientlab.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "prefixq/errors.hpp"
#include "prefixq/rng.hpp"

namespace prefixq::quotient {

void DiscreteWorld::validate(double tol) const {
  const std::size_t n = inputs.size();
  if (n == 0) throw InvalidArgument("world has no inputs");
  if (trajectories.empty()) throw InvalidArgument("world has no trajectories");
  if (latent_of.size() != n) throw InvalidArgument("latent_of must have one entry per input");
  if (joint.rows() != static_cast<Eigen::Index>(n) ||
      joint.cols() != static_cast<Eigen::Index>(trajectories.size())) {
    throw ShapeMismatch("joint table must be inputs x trajectories");
  }
  if (!joint.allFinite() || (joint.array() < 0.0).any()) throw InvalidArgument("joint table must be nonnegative");
  if (std::abs(joint.sum() - 1.0) > tol) throw InvalidArgument("joint table must sum to 1");
  for (std::size_t i = 0; i < n; ++i) {
    if (!(joint.row(static_cast<Eigen::Index>(i)).sum() > 0.0)) {
      throw InvalidArgument("input '" + inputs[i] + "' has zero marginal probability");
    }
  }
}

double total_variation(const ActionLaw& p, const ActionLaw& q) {
  if (p.size() != q.size()) throw ShapeMismatch("laws over different trajectory sets");
  double s = 0.0;
  for (std::size_t a = 0; a < p.size(); ++a) s += std::abs(p[a] - q[a]);
  return 0.5 * s;
}

LawMap bayes_law(const DiscreteWorld& world) {
  world.validate();
  const std::size_t n_traj = world.n_trajectories();
  std::map<int, std::vector<double>> mass;
  for (std::size_t i = 0; i < world.n_inputs(); ++i) {
    auto& acc = mass[world.latent_of[i]];
    acc.resize(n_traj, 0.0);
    for (std::size_t a = 0; a < n_traj; ++a) {
      acc[a] += world.joint(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a));
    }
  }
  LawMap laws;
  for (auto& [latent, m] : mass) {
    double total = 0.0;
    for (double v : m) total += v;
    if (!(total > 0.0)) throw InvalidArgument("latent " + std::to_string(latent) + " has zero mass");
    ActionLaw law(n_traj);
    for (std::size_t a = 0; a < n_traj; ++a) law[a] = m[a] / total;
    laws.emplace(latent, std::move(law));
  }
  return laws;
}

Partition build_quotient(const LawMap& laws, double tol) {
  if (tol < 0.0) throw InvalidArgument("quotient tolerance must be nonnegative");
  Partition partition;
  std::vector<const ActionLaw*> representatives;
  for (const auto& [latent, law] : laws) {
    int assigned = -1;
    for (std::size_t c = 0; c < representatives.size(); ++c) {
      if (total_variation(law, *representatives[c]) <= tol) {
        assigned = static_cast<int>(c);
        break;
      }
    }
    if (assigned < 0) {
      assigned = static_cast<int>(representatives.size());
      representatives.push_back(&law);
    }
    partition.emplace(latent, assigned);
  }
  return partition;
}

std::map<int, std::vector<int>> classes_of(const Partition& partition) {
  std::map<int, std::vector<int>> out;
  for (const auto& [latent, cls] : partition) out[cls].push_back(latent);
  return out;
}

std::size_t class_count(const Partition& partition) { return classes_of(partition).size(); }

namespace {

const ActionLaw& law_for(const LawMap& laws, int latent) {
  auto it = laws.find(latent);
  if (it == laws.end()) throw InvalidArgument("partition refers to latent " + std::to_string(latent) + " with no law");
  return it->second;
}

bool members_agree(const std::vector<int>& members, const LawMap& laws, double tol) {
  for (std::size_t i = 0; i < members.size(); ++i) {
    for (std::size_t j = i + 1; j < members.size(); ++j) {
      if (total_variation(law_for(laws, members[i]), law_for(laws, members[j])) > tol) return false;
    }
  }
  return true;
}

}  // namespace

bool check_sufficiency(const Partition& partition, const LawMap& laws, double tol) {
  if (partition.size() != laws.size()) return false;
  for (const auto& [_, members] : classes_of(partition)) {
    if (!members_agree(members, laws, tol)) return false;
  }
  return true;
}

bool check_minimality(const Partition& partition, const LawMap& laws, double tol) {
  const auto classes = classes_of(partition);
  for (auto a = classes.begin(); a != classes.end(); ++a) {
    for (auto b = std::next(a); b != classes.end(); ++b) {
      std::vector<int> merged = a->second;
      merged.insert(merged.end(), b->second.begin(), b->second.end());
      if (members_agree(merged, laws, tol)) return false;
    }
  }
  return true;
}

bool refines(const Partition& fine, const Partition& coarse) {
  std::map<int, int> fiber_to_class;
  for (const auto& [latent, label] : fine) {
    auto it = coarse.find(latent);
    if (it == coarse.end()) return false;
    auto [slot, inserted] = fiber_to_class.emplace(label, it->second);
    if (!inserted && slot->second != it->second) return false;
  }
  return fine.size() == coarse.size();
}

std::map<int, ActionLaw> quotient_decoder(const Partition& partition, const LawMap& laws) {
  std::map<int, ActionLaw> decoder;
  for (const auto& [latent, cls] : partition) decoder.emplace(cls, law_for(laws, latent));
  return decoder;
}

// ---------------------------------------------------------------------------

void FunctionClass::validate() const {
  if (outputs.empty()) throw InvalidArgument("function class is empty");
  const std::size_t n = outputs.front().size();
  if (n == 0) throw InvalidArgument("function class evaluated on no inputs");
  const Shape shape = shape_of(outputs.front().front());
  for (const auto& f : outputs) {
    if (f.size() != n) throw ShapeMismatch("predictors evaluated on different sample sizes");
    for (const Matrix& y : f) {
      if (shape_of(y) != shape) throw ShapeMismatch("predictor outputs have inconsistent shapes");
      if (!y.allFinite()) throw NonFinite("predictor output is not finite");
    }
  }
}

double trajectory_inner(const Matrix& u, const Matrix& v) {
  if (shape_of(u) != shape_of(v)) throw ShapeMismatch("trajectory_inner: shapes differ");
  return u.cwiseProduct(v).sum() / static_cast<double>(u.rows());
}

double trajectory_norm(const Matrix& v) { return std::sqrt(trajectory_inner(v, v)); }

ComplexityEstimate estimate_action_complexity(const FunctionClass& fc, std::size_t n_draws, std::uint64_t seed) {
  fc.validate();
  if (n_draws < 1) throw InvalidArgument("complexity estimate needs at least one draw");
  const std::size_t n = fc.n_inputs();
  const Eigen::Index rows = fc.outputs.front().front().rows();
  const Eigen::Index cols = fc.outputs.front().front().cols();

  ComplexityEstimate est;
  est.per_draw.reserve(n_draws);
  std::vector<Matrix> sigma(n, Matrix(rows, cols));
  for (std::size_t k = 0; k < n_draws; ++k) {
    Rng rng(derive_seed(seed, k));
    for (Matrix& s : sigma) {
      for (Eigen::Index e = 0; e < s.size(); ++e) s.data()[e] = rng.rademacher();
    }
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& f : fc.outputs) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += trajectory_inner(sigma[i], f[i]);
      best = std::max(best, acc / static_cast<double>(n));
    }
    est.per_draw.push_back(best);
  }
  double total = 0.0;
  for (double v : est.per_draw) total += v;
  est.estimate = std::sqrt(static_cast<double>(rows)) * total / static_cast<double>(n_draws);
  return est;
}

// ---------------------------------------------------------------------------

std::string canonical_bytes(const Matrix& m) {
  std::string bytes;
  const auto r = static_cast<std::int64_t>(m.rows());
  const auto c = static_cast<std::int64_t>(m.cols());
  bytes.append(reinterpret_cast<const char*>(&r), sizeof r);
  bytes.append(reinterpret_cast<const char*>(&c), sizeof c);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double v = m.data()[i];
    if (v == 0.0) v = 0.0;
    char buf[sizeof(double)];
    std::memcpy(buf, &v, sizeof v);
    bytes.append(buf, sizeof buf);
  }
  return bytes;
}

std::vector<std::pair<std::size_t, std::size_t>> check_injectivity(const std::vector<Matrix>& encodings) {
  std::unordered_map<std::string, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < encodings.size(); ++i) buckets[canonical_bytes(encodings[i])].push_back(i);
  std::vector<std::pair<std::size_t, std::size_t>> collisions;
  for (const auto& [_, ids] : buckets) {
    for (std::size_t a = 0; a < ids.size(); ++a) {
      for (std::size_t b = a + 1; b < ids.size(); ++b) collisions.emplace_back(ids[a], ids[b]);
    }
  }
  std::sort(collisions.begin(), collisions.end());
  return collisions;
}

std::vector<std::pair<std::size_t, std::size_t>> check_injectivity(const Encoder& encoder, std::size_t n_inputs) {
  std::vector<Matrix> encodings;
  encodings.reserve(n_inputs);
  for (std::size_t i = 0; i < n_inputs; ++i) encodings.push_back(encoder(i));
  return check_injectivity(encodings);
}

// ---------------------------------------------------------------------------

DiscreteWorld world_from_json_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw CorruptFile(std::string("world file is not valid JSON: ") + e.what());
  }
  try {
    if (j.value("format", std::string()) != "prefixq-world") throw CorruptFile("world file: missing format tag");
    if (j.value("version", 0) != 1) throw VersionMismatch("world file: unsupported version");
    DiscreteWorld w;
    w.inputs = j.at("inputs").get<std::vector<std::string>>();
    w.latent_of = j.at("latent_of").get<std::vector<int>>();
    w.trajectories = j.at("trajectories").get<std::vector<std::string>>();
    const auto rows = j.at("joint").get<std::vector<std::vector<double>>>();
    const auto n_cols = static_cast<Eigen::Index>(w.trajectories.size());
    w.joint.resize(static_cast<Eigen::Index>(rows.size()), n_cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (static_cast<Eigen::Index>(rows[i].size()) != n_cols) throw ShapeMismatch("world file: ragged joint table");
      for (std::size_t a = 0; a < rows[i].size(); ++a) {
        w.joint(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a)) = rows[i][a];
      }
    }
    w.validate();
    return w;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFile(std::string("world file: ") + e.what());
  }
}

std::string world_to_json_text(const DiscreteWorld& world) {
  nlohmann::json j;
  j["format"] = "prefixq-world";
  j["version"] = 1;
  j["inputs"] = world.inputs;
  j["latent_of"] = world.latent_of;
  j["trajectories"] = world.trajectories;
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(world.joint.rows()));
  for (Eigen::Index i = 0; i < world.joint.rows(); ++i) {
    rows[static_cast<std::size_t>(i)].assign(world.joint.row(i).data(),
                                             world.joint.row(i).data() + world.joint.cols());
  }
  j["joint"] = rows;
  return j.dump(2);
}

DiscreteWorld read_world(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open world file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return world_from_json_text(ss.str());
}

void write_world(const DiscreteWorld& world, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write world file '" + path + "'");
  out << world_to_json_text(world) << '\n';
}

QuotientSummary summarize_quotient(const DiscreteWorld& world, double tol) {
  const LawMap laws = bayes_law(world);
  QuotientSummary s;
  s.partition = build_quotient(laws, tol);
  s.n_latents = laws.size();
  s.n_classes = class_count(s.partition);
  s.sufficient = check_sufficiency(s.partition, laws, tol);
  s.minimal = s.sufficient && check_minimality(s.partition, laws, tol);
  const auto decoder = quotient_decoder(s.partition, laws);
  s.round_trip = true;
  for (const auto& [latent, law] : laws) {
    if (total_variation(decoder.at(s.partition.at(latent)), law) > tol) s.round_trip = false;
  }
  return s;
}

}  // namespace prefixq::quotient
