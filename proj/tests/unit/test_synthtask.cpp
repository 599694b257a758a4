#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "prefixq/errors.hpp"
#include "prefixq/synthtask.hpp"

namespace prefixq::synth {
namespace {

TaskSpec small_spec() {
  TaskSpec s;
  s.n_tasks = 4;
  s.n_nuisances = 8;
  return s;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

TEST(TaskSpec, Validation) {
  EXPECT_NO_THROW(TaskSpec{}.validate());
  TaskSpec s;
  s.n_tasks = 1;
  EXPECT_THROW(s.validate(), InvalidArgument);
  s = TaskSpec{};
  s.task_rows = s.prefix_tokens;
  EXPECT_THROW(s.validate(), InvalidArgument);
  s = TaskSpec{};
  s.train_fraction = 1.0;
  EXPECT_THROW(s.validate(), InvalidArgument);
  s = TaskSpec{};
  s.n_nuisances = 2;
  s.train_fraction = 0.9;
  EXPECT_THROW(s.validate(), InvalidArgument);
}

TEST(GenerateDataset, CountsAndDisjointSplits) {
  const Dataset d = generate_dataset(small_spec());
  EXPECT_EQ(d.train.size(), 24u);
  EXPECT_EQ(d.test.size(), 8u);
  EXPECT_EQ(d.train_nuisances.size(), 6u);
  EXPECT_EQ(d.test_nuisances.size(), 2u);
  std::set<int> train(d.train_nuisances.begin(), d.train_nuisances.end());
  for (int n : d.test_nuisances) EXPECT_EQ(train.count(n), 0u);
  for (const Episode& e : d.train) EXPECT_EQ(train.count(e.nuisance), 1u);
  for (const Episode& e : d.test) EXPECT_EQ(train.count(e.nuisance), 0u);
}

TEST(GenerateDataset, DeterministicPerSeed) {
  const Dataset a = generate_dataset(small_spec());
  const Dataset b = generate_dataset(small_spec());
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].prefix, b.train[i].prefix);
    EXPECT_EQ(a.train[i].expert, b.train[i].expert);
  }
  TaskSpec other = small_spec();
  other.seed = 1;
  EXPECT_FALSE(encode_prompt(0, 0, other) == encode_prompt(0, 0, small_spec()));
}

TEST(EncodePrompt, InjectiveOverFullGrid) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    TaskSpec s;
    s.seed = seed;
    std::vector<Matrix> enc;
    for (int t = 0; t < s.n_tasks; ++t)
      for (int n = 0; n < s.n_nuisances; ++n) enc.push_back(encode_prompt(t, n, s));
    EXPECT_TRUE(quotient::check_injectivity(enc).empty()) << "seed " << seed;
  }
}

TEST(EncodePrompt, TaskRowsIgnoreNuisance) {
  const TaskSpec s;
  for (int t = 0; t < s.n_tasks; ++t) {
    const Matrix ref = encode_prompt(t, 0, s).topRows(s.task_rows);
    for (int n = 1; n < s.n_nuisances; ++n) EXPECT_EQ(encode_prompt(t, n, s).topRows(s.task_rows), ref);
  }
  EXPECT_FALSE(encode_prompt(0, 0, s).bottomRows(s.prefix_tokens - s.task_rows) ==
               encode_prompt(0, 1, s).bottomRows(s.prefix_tokens - s.task_rows));
}

TEST(EncodePrompt, ShapeAndRangeErrors) {
  const TaskSpec s;
  EXPECT_EQ(shape_of(encode_prompt(3, 5, s)), (Shape{s.prefix_tokens, s.model_dim}));
  EXPECT_THROW(encode_prompt(s.n_tasks, 0, s), InvalidArgument);
  EXPECT_THROW(encode_prompt(0, -1, s), InvalidArgument);
}

TEST(NoisyCopy, ZeroSigmaIsExactAndNoiseIsSeeded) {
  const TaskSpec s;
  const Matrix h = encode_prompt(1, 1, s);
  EXPECT_EQ(noisy_copy(h, 0.0, 3), h);
  EXPECT_EQ(noisy_copy(h, 0.1, 3), noisy_copy(h, 0.1, 3));
  const Matrix diff = noisy_copy(h, 0.1, 3) - h;
  const double sd = std::sqrt(diff.squaredNorm() / static_cast<double>(diff.size()));
  EXPECT_NEAR(sd, 0.1, 0.02);
}

TEST(MinimumJerk, ClosedFormValues) {
  EXPECT_EQ(minimum_jerk(0.0), 0.0);
  EXPECT_EQ(minimum_jerk(1.0), 1.0);
  EXPECT_DOUBLE_EQ(minimum_jerk(0.5), 0.5);
  for (double s = 0.0; s <= 1.0; s += 0.05) {
    EXPECT_NEAR(minimum_jerk(s), s * s * s * (10.0 - 15.0 * s + 6.0 * s * s), 4e-15);
    EXPECT_NEAR(minimum_jerk(s) + minimum_jerk(1.0 - s), 1.0, 1e-14);
  }
}

TEST(ExpertTrajectory, EndpointsAndTaskDependence) {
  const TaskSpec s;
  std::vector<Matrix> chunks;
  for (int t = 0; t < s.n_tasks; ++t) {
    const ActionChunk c = expert_trajectory(t, s);
    EXPECT_EQ(shape_of(c), (Shape{s.horizon, s.action_dim}));
    EXPECT_EQ(Eigen::RowVectorXd(c.row(0)), Eigen::RowVectorXd::Zero(s.action_dim));
    EXPECT_LT((Eigen::RowVectorXd(c.row(s.horizon - 1)) - task_target(t, s)).norm(), 1e-15);
    EXPECT_NEAR(task_target(t, s).norm(), s.target_radius, 1e-15);
    chunks.push_back(c);
  }
  EXPECT_TRUE(quotient::check_injectivity(chunks).empty());
}

TEST(ExpertTrajectory, OneDimensionalTargetsSpanInterval) {
  TaskSpec s = small_spec();
  s.action_dim = 1;
  EXPECT_DOUBLE_EQ(task_target(0, s)(0), -1.0);
  EXPECT_DOUBLE_EQ(task_target(s.n_tasks - 1, s)(0), 1.0);
}

TEST(ExpertTrajectory, SameAcrossNuisances) {
  const Dataset d = generate_dataset(small_spec());
  for (const Episode& e : d.train) EXPECT_EQ(e.expert, expert_trajectory(e.task, d.spec));
  for (const Episode& e : d.test) EXPECT_EQ(e.expert, expert_trajectory(e.task, d.spec));
}

TEST(GenerateDataset, NormStatsCoverTrainingActions) {
  const Dataset d = generate_dataset(TaskSpec{});
  std::size_t inside = 0, total = 0;
  for (const Episode& e : d.train) {
    const Matrix n = normalize_actions(e.expert, d.stats);
    for (Eigen::Index i = 0; i < n.size(); ++i) {
      inside += std::abs(n.data()[i]) <= 1.0 + 1e-12;
      ++total;
    }
  }
  EXPECT_GE(static_cast<double>(inside) / static_cast<double>(total), 0.98);
}

TEST(WorldFromDataset, QuotientHasOneClassPerTask) {
  const Dataset d = generate_dataset(TaskSpec{});
  std::vector<Episode> all = d.train;
  all.insert(all.end(), d.test.begin(), d.test.end());
  for (const Discretizer& disc : {ideal_discretizer(d.spec), identity_discretizer()}) {
    const quotient::DiscreteWorld w = world_from_dataset(all, disc);
    ASSERT_NO_THROW(w.validate());
    EXPECT_EQ(w.n_trajectories(), static_cast<std::size_t>(d.spec.n_tasks));
    const quotient::QuotientSummary q = quotient::summarize_quotient(w);
    EXPECT_EQ(q.n_classes, static_cast<std::size_t>(d.spec.n_tasks));
    EXPECT_TRUE(q.sufficient);
    EXPECT_TRUE(q.minimal);
  }
  const auto ideal = world_from_dataset(all, ideal_discretizer(d.spec));
  const auto identity = world_from_dataset(all, identity_discretizer());
  EXPECT_EQ(quotient::bayes_law(ideal).size(), static_cast<std::size_t>(d.spec.n_tasks));
  EXPECT_EQ(quotient::bayes_law(identity).size(), all.size());
}

TEST(WorldFromDataset, SingleTaskHasOneClass) {
  const Dataset d = generate_dataset(small_spec());
  std::vector<Episode> one;
  std::copy_if(d.train.begin(), d.train.end(), std::back_inserter(one), [](const Episode& e) { return e.task == 2; });
  const quotient::QuotientSummary q = quotient::summarize_quotient(world_from_dataset(one, identity_discretizer()));
  EXPECT_EQ(q.n_classes, 1u);
  EXPECT_THROW(world_from_dataset({}, identity_discretizer()), InvalidArgument);
}

TEST(DatasetFile, RoundTripIsBitExact) {
  TaskSpec s = small_spec();
  s.obs_noise = 0.05;
  s.seed = 11;
  const Dataset d = generate_dataset(s);
  const std::string path = temp_path("prefixq_dataset_test.bin");
  save_dataset(d, path);
  const Dataset back = load_dataset(path);
  EXPECT_EQ(back.spec, d.spec);
  EXPECT_EQ(back.train_nuisances, d.train_nuisances);
  EXPECT_EQ(back.test_nuisances, d.test_nuisances);
  EXPECT_EQ(back.stats.lower, d.stats.lower);
  EXPECT_EQ(back.stats.upper, d.stats.upper);
  ASSERT_EQ(back.train.size(), d.train.size());
  ASSERT_EQ(back.test.size(), d.test.size());
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    EXPECT_EQ(back.train[i].task, d.train[i].task);
    EXPECT_EQ(back.train[i].nuisance, d.train[i].nuisance);
    EXPECT_EQ(back.train[i].prefix, d.train[i].prefix);
    EXPECT_EQ(back.train[i].expert, d.train[i].expert);
  }
  std::filesystem::remove(path);
}

TEST(DatasetFile, DetectsCorruption) {
  const std::string path = temp_path("prefixq_dataset_corrupt.bin");
  save_dataset(generate_dataset(small_spec()), path);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  bytes[bytes.size() / 2] ^= 0x20;
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  EXPECT_THROW(load_dataset(path), CorruptFile);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), 20);
  }
  EXPECT_THROW(load_dataset(path), CorruptFile);
  std::filesystem::remove(path);
  EXPECT_THROW(load_dataset(path), IoError);
}

}  // namespace
}  // namespace prefixq::synth
