#include "oracle.hpp"

#include "prefdyn/data.hpp"
#include "prefdyn/errors.hpp"
#include "prefdyn/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

using namespace prefdyn;

namespace {

struct Problem {
  SplitPolicy policy;
  Datasets data;
};

Problem random_problem(std::uint64_t seed, PolicyKind kind = PolicyKind::tabular) {
  std::mt19937_64 rng(seed);
  RandomTaskParams params;
  params.kind = kind;
  auto g = generate_random_task(params, rng);
  Datasets d{all_preference_pairs(g.task.space), all_sft_pairs(g.task.space), g.task.space};
  return {g.policy, d};
}

void expect_same_rows(const TrainReport& a, const TrainReport& b) {
  ASSERT_EQ(a.rows.size(), b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].loss.dpo, b.rows[i].loss.dpo);
    EXPECT_EQ(a.rows[i].loss.total, b.rows[i].loss.total);
    EXPECT_EQ(a.rows[i].loss.z, b.rows[i].loss.z);
    EXPECT_EQ(a.rows[i].accuracy, b.rows[i].accuracy);
    EXPECT_EQ(a.rows[i].grad_norm_theta, b.rows[i].grad_norm_theta);
    EXPECT_EQ(a.rows[i].grad_norm_phi, b.rows[i].grad_norm_phi);
  }
  EXPECT_EQ(a.final_policy.params().values(), b.final_policy.params().values());
}

}  // namespace

TEST(Inner, ZeroStepsIsIdentity) {
  auto p = random_problem(1);
  const auto inner = inner_sft_descent(p.policy, p.data.sft_pairs, 0.2, 0);
  EXPECT_EQ(inner.phi_prime, Eigen::VectorXd(p.policy.params().phi()));
  EXPECT_EQ(inner.sft_star, sft_loss(p.policy, p.data.sft_pairs));
}

TEST(Inner, SmallStepDescends) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    auto p = random_problem(s, s % 2 == 0 ? PolicyKind::tabular : PolicyKind::log_linear);
    const auto inner = inner_sft_descent(p.policy, p.data.sft_pairs, 1e-3, 1);
    EXPECT_LE(inner.sft_star, sft_loss(p.policy, p.data.sft_pairs)) << s;
  }
}

TEST(Inner, ManyStepsReachNearOptimum) {
  const auto p = SplitPolicy::tabular(1, 2);
  const std::vector<SftPair> pairs{{0, 0}};
  const auto inner = inner_sft_descent(p, pairs, 1.0, 25);
  const auto solved = with_phi(p, inner.phi_prime);
  EXPECT_GE(solved.prob(0, 0), 0.9);
  // The live policy is untouched.
  EXPECT_EQ(p.prob(0, 0), 0.5);
}

TEST(Clip, ScalesToNorm) {
  Eigen::VectorXd g(2);
  g << 3.0, 4.0;
  EXPECT_EQ(clip_to_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g.norm(), 1.0, 1e-15);
  Eigen::VectorXd h(2);
  h << 0.3, 0.4;
  EXPECT_DOUBLE_EQ(clip_to_norm(h, std::nullopt), 0.5);
  EXPECT_EQ(h(0), 0.3);
}

TEST(SpoStep, ResidualZeroWithoutInnerSteps) {
  auto p = random_problem(2);
  SpoConfig cfg;
  cfg.K = 0;
  const auto ref = p.policy;
  const auto r = spo_step(p.policy, ref, p.data.triples, p.data.sft_pairs, cfg);
  EXPECT_EQ(r.constraint_residual, 0.0);
}

TEST(SpoStep, ResidualNonNegativeForSmallInnerStep) {
  for (std::uint64_t s = 0; s < 30; ++s) {
    auto p = random_problem(s);
    SpoConfig cfg;
    cfg.K = 1;
    cfg.eta_phi_prime = 1e-3;
    const auto ref = p.policy;
    const auto r = spo_step(p.policy, ref, p.data.triples, p.data.sft_pairs, cfg);
    EXPECT_GE(r.constraint_residual, 0.0) << s;
  }
}

TEST(SpoStep, ZeroWeightsMatchDpoStepBitwise) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto a = random_problem(s, s % 2 == 0 ? PolicyKind::tabular : PolicyKind::log_linear);
    auto b = a;
    SpoConfig cfg;
    cfg.lambda = 0.0;
    cfg.gamma = 0.0;
    const auto ref = a.policy;
    spo_step(a.policy, ref, a.data.triples, a.data.sft_pairs, cfg);
    dpo_step(b.policy, ref, b.data.triples, cfg);
    EXPECT_EQ(a.policy.params().values(), b.policy.params().values());
  }
}

TEST(SpoStep, TinyClipBoundsTheUpdate) {
  auto p = random_problem(3);
  SpoConfig cfg;
  cfg.clip_norm = 1e-12;
  const auto before = p.policy.params();
  const auto ref = p.policy;
  spo_step(p.policy, ref, p.data.triples, p.data.sft_pairs, cfg);
  const double dt = (p.policy.params().theta() - before.theta()).norm();
  const double dp = (p.policy.params().phi() - before.phi()).norm();
  // Allow the rounding of adding a ~1e-13 step to O(1) parameters.
  const double ulps = 4.0 * std::numeric_limits<double>::epsilon() *
                      std::sqrt(static_cast<double>(before.size())) * before.values().cwiseAbs().maxCoeff();
  EXPECT_LE(dt, cfg.eta_theta * 1e-12 + ulps);
  EXPECT_LE(dp, cfg.eta_phi * 1e-12 + ulps);
  EXPECT_GT(dp, 0.5 * cfg.eta_phi * 1e-12);
}

TEST(SpoStep, NonFiniteParametersNameATerm) {
  auto p = random_problem(4);
  const auto ref = p.policy;
  p.policy.params().values()(0) = std::numeric_limits<double>::quiet_NaN();
  SpoConfig cfg;
  try {
    spo_step(p.policy, ref, p.data.triples, p.data.sft_pairs, cfg);
    FAIL() << "expected NonFiniteGradientError";
  } catch (const NonFiniteGradientError& e) {
    EXPECT_NE(std::string("abcde").find(e.term()), std::string::npos);
  }
}

TEST(DpoStep, SaturatedMarginBarelyMoves) {
  const auto ref = SplitPolicy::tabular(1, 3);
  Eigen::VectorXd theta(3);
  theta << 200.0, -200.0, 0.0;
  auto pol = SplitPolicy::tabular(1, 3, theta, Eigen::VectorXd::Zero(3));
  const auto before = pol.params().values();
  const std::vector<PreferenceTriple> ts{{0, 0, 1}};
  SpoConfig cfg;
  dpo_step(pol, ref, ts, cfg);
  EXPECT_LE((pol.params().values() - before).norm(), 1e-8);
}

TEST(DpoStep, RaisesMargin) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto p = random_problem(s);
    const auto ref = p.policy;
    SpoConfig cfg;
    const std::vector<PreferenceTriple> one{p.data.triples.front()};
    const double before = margin_z(p.policy, ref, one[0], cfg.beta);
    dpo_step(p.policy, ref, one, cfg);
    EXPECT_GT(margin_z(p.policy, ref, one[0], cfg.beta), before) << s;
  }
}

TEST(SftTrain, ZeroEpochsIsIdentity) {
  auto p = random_problem(5);
  const auto before = p.policy.params().values();
  const auto losses = sft_train(p.policy, p.data.sft_pairs, 0.1, 0);
  EXPECT_EQ(losses.size(), 1u);
  EXPECT_EQ(p.policy.params().values(), before);
}

TEST(SftTrain, LossDecreasesAndAccuracyHolds) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto p = random_problem(s);
    const double acc0 = accuracy(p.policy, p.data.space);
    const auto losses = sft_train(p.policy, p.data.sft_pairs, 0.1, 50);
    ASSERT_EQ(losses.size(), 51u);
    for (std::size_t i = 1; i < losses.size(); ++i) EXPECT_LE(losses[i], losses[i - 1] + 1e-15);
    EXPECT_GE(accuracy(p.policy, p.data.space), acc0) << s;
  }
}

TEST(TrainRun, OneStepOneRow) {
  auto p = random_problem(6);
  SpoConfig cfg;
  cfg.T = 1;
  cfg.batch_size = static_cast<int>(p.data.triples.size());
  for (const auto m : {Method::sft, Method::dpo, Method::spo}) {
    const auto r = train_run(m, p.policy, p.data, cfg);
    EXPECT_EQ(r.rows.size(), 1u);
    EXPECT_EQ(r.rows[0].step, 0);
  }
}

TEST(TrainRun, SameSeedSameReport) {
  auto p = random_problem(7, PolicyKind::log_linear);
  SpoConfig cfg;
  cfg.T = 30;
  cfg.seed = 42;
  const WarmStart warm{3, 0.1};
  for (const auto m : {Method::sft, Method::dpo, Method::spo}) {
    expect_same_rows(train_run(m, p.policy, p.data, cfg, warm), train_run(m, p.policy, p.data, cfg, warm));
  }
}

TEST(TrainRun, ZeroWeightSpoTrajectoryEqualsDpo) {
  auto p = random_problem(8, PolicyKind::log_linear);
  SpoConfig cfg;
  cfg.T = 40;
  cfg.lambda = 0.0;
  cfg.gamma = 0.0;
  const auto spo = train_run(Method::spo, p.policy, p.data, cfg);
  const auto dpo = train_run(Method::dpo, p.policy, p.data, cfg);
  ASSERT_EQ(spo.rows.size(), dpo.rows.size());
  for (std::size_t i = 0; i < spo.rows.size(); ++i) {
    EXPECT_EQ(spo.rows[i].loss.dpo, dpo.rows[i].loss.dpo);
    EXPECT_EQ(spo.rows[i].grad_norm_theta, dpo.rows[i].grad_norm_theta);
  }
  EXPECT_EQ(spo.final_policy.params().values(), dpo.final_policy.params().values());
}

TEST(TrainRun, ReferenceCheckpointOrdering) {
  auto p = random_problem(9);
  SpoConfig cfg;
  cfg.T = 1;
  const WarmStart warm{5, 0.1};
  cfg.ref_checkpoint = RefCheckpoint::post_sft;
  const auto post = train_run(Method::dpo, p.policy, p.data, cfg, warm);
  EXPECT_EQ(post.ref_policy.params().values(), post.initial_policy.params().values());
  cfg.ref_checkpoint = RefCheckpoint::init;
  const auto init = train_run(Method::dpo, p.policy, p.data, cfg, warm);
  EXPECT_EQ(init.ref_policy.params().values(), p.policy.params().values());
  EXPECT_NE(init.initial_policy.params().values(), p.policy.params().values());
}

TEST(TrainRun, ObserverSeesEveryStep) {
  auto p = random_problem(10);
  SpoConfig cfg;
  cfg.T = 7;
  std::vector<int> seen;
  const auto r = train_run(Method::spo, p.policy, p.data, cfg, {},
                           [&](int step, const SplitPolicy&) { seen.push_back(step); });
  EXPECT_EQ(seen, (std::vector<int>{1, 2, 3, 4, 5, 6, 7}));
  for (const auto& row : r.rows) {
    EXPECT_GE(row.accuracy, 0.0);
    EXPECT_LE(row.accuracy, 1.0);
  }
}

TEST(TrainRun, DatasetSpaceMismatchThrows) {
  auto p = random_problem(11);
  p.data.triples.push_back({0, 0, 99});
  EXPECT_THROW(train_run(Method::dpo, p.policy, p.data, SpoConfig{}), std::invalid_argument);
}

TEST(TrainRun, MethodNeedsItsData) {
  auto p = random_problem(12);
  auto no_pairs = p.data;
  no_pairs.sft_pairs.clear();
  EXPECT_THROW(train_run(Method::spo, p.policy, no_pairs, SpoConfig{}), std::invalid_argument);
  EXPECT_NO_THROW(train_run(Method::dpo, p.policy, no_pairs, SpoConfig{}));
}

TEST(Config, ValidateNamesField) {
  SpoConfig cfg;
  cfg.K = -1;
  try {
    cfg.validate();
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("K"), std::string::npos);
  }
  cfg = SpoConfig{};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = SpoConfig{};
  cfg.beta = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  EXPECT_EQ(parse_method("spo"), Method::spo);
  EXPECT_THROW(parse_method("ppo"), std::invalid_argument);
}

// Displacement rescue on the adversarial task: DPO loses pi(y_w), SPO gains.
TEST(TrainRun, SpoRescuesDisplacementProneTask) {
  std::mt19937_64 rng(0);
  const auto task = generate_displacement_prone(DisplacementParams{}, rng);
  const Datasets data{{task.triple}, {{0, 0}}, task.task.space};
  SpoConfig cfg;
  cfg.T = 200;
  cfg.batch_size = 1;
  const double initial = task.policy.prob(0, 0);
  const auto dpo = train_run(Method::dpo, task.policy, data, cfg);
  const auto spo = train_run(Method::spo, task.policy, data, cfg);
  EXPECT_LT(dpo.final_policy.prob(0, 0), initial);
  EXPECT_GT(spo.final_policy.prob(0, 0), initial);
}
