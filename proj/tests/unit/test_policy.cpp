#include <gtest/gtest.h>

#include "prefixq/errors.hpp"
#include "prefixq/policy.hpp"

namespace prefixq {
namespace {

ModelDims small_dims() {
  ModelDims d;
  d.prefix_tokens = 5;
  d.model_dim = 8;
  d.n_heads = 2;
  d.ff_dim = 12;
  d.horizon = 4;
  d.action_dim = 2;
  d.expert_hidden = 10;
  d.cond_dim = 6;
  d.tau_frequencies = 3;
  return d;
}

PolicyConfig config_for(const ModelDims& dims) {
  PolicyConfig c;
  c.dims = dims;
  return c;
}

// Perturbs LN and gate parameters away from their initial values so the
// checks exercise every path.
ParamSet jittered(const ModelDims& dims, std::uint64_t seed) {
  ParamSet p = init_params(seed, dims).merged();
  Rng rng(seed + 1);
  for (const std::string& name : p.names()) {
    Matrix& m = p.mutable_at(name);
    m += random_normal(m.rows(), m.cols(), rng, 0.1);
  }
  return p;
}

std::size_t expected_parameter_count(const ModelDims& d) {
  const std::size_t m = d.model_dim, f = d.ff_dim, c = d.cond_dim, h = d.expert_hidden;
  const std::size_t chunk = static_cast<std::size_t>(d.horizon) * d.action_dim;
  const std::size_t per_layer = 4 * (m * m + m) + 4 * m + (m * f + f) + (f * m + m) + 1;
  const std::size_t expert = (2 * d.tau_frequencies * c + c) + (m * c + c) + ((chunk + 2 * c) * h + h) +
                             (h * h + h) + (h * chunk + chunk);
  return per_layer * d.depth + expert;
}

TEST(InitParams, DeterministicPerSeed) {
  const ModelDims dims;
  EXPECT_EQ(init_params(3, dims).merged(), init_params(3, dims).merged());
  EXPECT_FALSE(init_params(3, dims).merged() == init_params(4, dims).merged());
}

TEST(InitParams, DeskScaleParameterCount) {
  ModelDims dims;
  const ParamSet p = init_params(0, dims).merged();
  EXPECT_EQ(p.scalar_count(), expected_parameter_count(dims));
  EXPECT_EQ(p.scalar_count(), 81553u);
  dims.depth = 2;
  EXPECT_EQ(init_params(0, dims).merged().scalar_count(), expected_parameter_count(dims));
}

TEST(InitParams, DefaultPreset) {
  const ModelDims dims;
  const PolicyConfig cfg;
  EXPECT_EQ(dims.depth, 1);
  EXPECT_EQ(dims.n_heads, 8);
  EXPECT_EQ(cfg.quant.bits, 8);
}

TEST(InitParams, ScaledUniformAndNormDefaults) {
  const ModelDims dims;
  const ParamSet p = init_params(1, dims).merged();
  const double bound = 1.0 / std::sqrt(64.0);
  EXPECT_LE(p.at("block.0.wq.w").cwiseAbs().maxCoeff(), bound);
  EXPECT_GT(p.at("block.0.wq.w").cwiseAbs().maxCoeff(), 0.9 * bound);
  EXPECT_EQ(p.at("block.0.ln1.gamma"), Matrix::Ones(1, 64));
  EXPECT_EQ(p.at("block.0.ln2.beta"), Matrix::Zero(1, 64));
  EXPECT_EQ(p.at("block.0.gate.alpha")(0, 0), 0.0);
  EXPECT_EQ(p.at("expert.head.b"), Matrix::Zero(1, 16));
}

TEST(InitParams, InvalidDims) {
  ModelDims d;
  d.n_heads = 7;
  EXPECT_THROW(init_params(0, d), InvalidArgument);
  d = ModelDims{};
  d.horizon = 2;
  EXPECT_THROW(init_params(0, d), InvalidArgument);
  d = ModelDims{};
  d.depth = 0;
  EXPECT_THROW(init_params(0, d), InvalidArgument);
}

TEST(PrefixBlock, PreservesShapeAtAnyDepth) {
  for (int depth : {1, 2, 3}) {
    ModelDims dims = small_dims();
    dims.depth = depth;
    Rng rng(depth);
    const PrefixLatent h = random_normal(dims.prefix_tokens, dims.model_dim, rng);
    const ParamSet p = init_params(1, dims).merged();
    for (bool q : {true, false}) {
      const PrefixLatent out = prefix_block_forward(h, p, config_for(dims), q);
      EXPECT_EQ(shape_of(out), shape_of(h));
      EXPECT_TRUE(all_finite(out));
    }
  }
}

TEST(PrefixBlock, RejectsWrongShape) {
  const ModelDims dims = small_dims();
  const ParamSet p = init_params(1, dims).merged();
  EXPECT_THROW(prefix_block_forward(Matrix::Zero(5, 9), p, config_for(dims), true), ShapeMismatch);
}

TEST(PrefixBlock, TokenPermutationEquivariance) {
  const ModelDims dims = small_dims();
  const ParamSet p = jittered(dims, 2);
  Rng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const PrefixLatent h = random_normal(dims.prefix_tokens, dims.model_dim, rng);
    std::vector<int> perm(static_cast<std::size_t>(dims.prefix_tokens));
    for (int i = 0; i < dims.prefix_tokens; ++i) perm[static_cast<std::size_t>(i)] = i;
    for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.index(i + 1)]);
    PrefixLatent ph(h.rows(), h.cols());
    for (Eigen::Index i = 0; i < h.rows(); ++i) ph.row(i) = h.row(perm[static_cast<std::size_t>(i)]);

    const PrefixLatent out = prefix_block_forward(h, p, config_for(dims), false);
    const PrefixLatent pout = prefix_block_forward(ph, p, config_for(dims), false);
    for (Eigen::Index i = 0; i < h.rows(); ++i) {
      EXPECT_LT((pout.row(i) - out.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(PrefixBlock, QuantizationSlotOnlyChangesValues) {
  const ModelDims dims = small_dims();
  const ParamSet p = jittered(dims, 3);
  Rng rng(4);
  const PrefixLatent h = random_normal(dims.prefix_tokens, dims.model_dim, rng);
  PolicyConfig cfg = config_for(dims);
  cfg.quant.bits = 3;
  const PrefixLatent on = prefix_block_forward(h, p, cfg, true);
  const PrefixLatent off = prefix_block_forward(h, p, cfg, false);
  EXPECT_EQ(shape_of(on), shape_of(off));
  EXPECT_TRUE(all_finite(on));
  EXPECT_GT((on - off).cwiseAbs().maxCoeff(), 0.0);
}

diff::LossFn block_loss(const ModelDims& dims, const PrefixLatent& h, const Matrix& w, bool quantize) {
  return [=](diff::Tape& t, const diff::VarMap& vars) {
    const diff::Var out = prefix_block_forward(t.constant(h), vars, config_for(dims), quantize);
    return diff::sum(diff::mul(out, t.constant(w)));
  };
}

TEST(PrefixBlock, FiniteDifferenceWithoutQuantization) {
  ModelDims dims = small_dims();
  dims.depth = 2;
  Rng rng(5);
  const PrefixLatent h = random_normal(dims.prefix_tokens, dims.model_dim, rng);
  const Matrix w = random_normal(dims.prefix_tokens, dims.model_dim, rng);
  const ParamSet p = jittered(dims, 6).subset("block.");
  const diff::FdReport r = diff::finite_difference_check(block_loss(dims, h, w, false), p);
  EXPECT_TRUE(r.passed) << r.worst_parameter << " " << r.max_relative_error;
  EXPECT_LT(r.max_relative_error, 1e-6);
}

TEST(PrefixBlock, FiniteDifferenceUnderSurrogateContract) {
  const ModelDims dims = small_dims();
  Rng rng(7);
  const PrefixLatent h = random_normal(dims.prefix_tokens, dims.model_dim, rng);
  const Matrix w = random_normal(dims.prefix_tokens, dims.model_dim, rng);
  const ParamSet p = jittered(dims, 8).subset("block.");
  const diff::FdReport r = diff::finite_difference_check(block_loss(dims, h, w, true), p);
  EXPECT_TRUE(r.passed) << r.worst_parameter << " " << r.max_relative_error;
  EXPECT_EQ(r.surrogate_sites, 1u);
}

TEST(FourierFeatures, PowersOfTwoFrequencies) {
  const Matrix f = fourier_features(0.3, 4);
  ASSERT_EQ(f.cols(), 8);
  for (int k = 0; k < 4; ++k) {
    EXPECT_EQ(f(0, k), std::sin(std::ldexp(1.0, k) * 0.3));
    EXPECT_EQ(f(0, 4 + k), std::cos(std::ldexp(1.0, k) * 0.3));
  }
}

TEST(ExpertVelocity, ShapeAndDeterminism) {
  const ModelDims dims;
  const ParamSet p = init_params(2, dims).merged();
  Rng rng(1);
  const Matrix x = random_normal(dims.horizon, dims.action_dim, rng);
  const PrefixLatent h = random_normal(dims.prefix_tokens, dims.model_dim, rng);
  for (double tau : {0.0, 0.37, 1.0}) {
    const ActionChunk v = expert_velocity(x, tau, h, p, dims);
    EXPECT_EQ(v.rows(), dims.horizon);
    EXPECT_EQ(v.cols(), dims.action_dim);
    EXPECT_EQ(v, expert_velocity(x, tau, h, p, dims));
  }
}

TEST(ExpertVelocity, RejectsTauOutsideUnitInterval) {
  const ModelDims dims;
  const ParamSet p = init_params(2, dims).merged();
  const Matrix x = Matrix::Zero(dims.horizon, dims.action_dim);
  const PrefixLatent h = Matrix::Zero(dims.prefix_tokens, dims.model_dim);
  EXPECT_THROW(expert_velocity(x, -0.01, h, p, dims), InvalidArgument);
  EXPECT_THROW(expert_velocity(x, 1.5, h, p, dims), InvalidArgument);
  EXPECT_THROW(expert_velocity(Matrix::Zero(3, 2), 0.5, h, p, dims), ShapeMismatch);
}

TEST(ExpertVelocity, SensitiveToSinglePrefixToken) {
  const ModelDims dims;
  const ParamSet p = init_params(5, dims).merged();
  Rng rng(3);
  const Matrix x = random_normal(dims.horizon, dims.action_dim, rng);
  const PrefixLatent h = random_normal(dims.prefix_tokens, dims.model_dim, rng);
  PrefixLatent h2 = h;
  h2.row(7) = random_normal(1, dims.model_dim, rng);
  const double diff = (expert_velocity(x, 0.5, h, p, dims) - expert_velocity(x, 0.5, h2, p, dims)).cwiseAbs().maxCoeff();
  EXPECT_GT(diff, 1e-9);
}

TEST(ExpertVelocity, FiniteDifference) {
  const ModelDims dims = small_dims();
  Rng rng(10);
  const Matrix x = random_normal(dims.horizon, dims.action_dim, rng);
  const PrefixLatent h = random_normal(dims.prefix_tokens, dims.model_dim, rng);
  const Matrix w = random_normal(dims.horizon, dims.action_dim, rng);
  auto f = [&](diff::Tape& t, const diff::VarMap& vars) {
    const diff::Var v = expert_velocity(t.constant(x), 0.42, t.constant(h), vars, dims);
    return diff::sum(diff::mul(v, t.constant(w)));
  };
  const diff::FdReport r = diff::finite_difference_check(f, jittered(dims, 11).subset("expert."));
  EXPECT_TRUE(r.passed) << r.worst_parameter;
}

TEST(MeanGate, FollowsAlphasAndAdaptiveFlag) {
  ModelDims dims = small_dims();
  dims.depth = 2;
  ParamSet p = init_params(0, dims).merged();
  p.assign("block.1.gate.alpha", Matrix::Constant(1, 1, 2.0));
  PolicyConfig cfg = config_for(dims);
  const double g1 = gate_value(GateState{0.0}, cfg.quant);
  const double g2 = gate_value(GateState{2.0}, cfg.quant);
  EXPECT_DOUBLE_EQ(mean_gate(p, cfg), 0.5 * (g1 + g2));
  cfg.adaptive_ste = false;
  EXPECT_EQ(mean_gate(p, cfg), 1.0);
}

TEST(PolicyParams, SplitMergeRoundTrip) {
  const PolicyParams p = init_params(4, ModelDims{});
  const PolicyParams back = PolicyParams::split(p.merged());
  EXPECT_EQ(back.block, p.block);
  EXPECT_EQ(back.expert, p.expert);
}

}  // namespace
}  // namespace prefixq
