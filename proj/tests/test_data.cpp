#include "oracle.hpp"

#include "prefdyn/data.hpp"
#include "prefdyn/dynamics.hpp"
#include "prefdyn/errors.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

using namespace prefdyn;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "prefdyn_test_data";
  fs::create_directories(dir);
  return dir / name;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

// Independent recount: the output with the largest oracle probability, lowest
// index on ties, checked against the labels.
double recount_accuracy(const SplitPolicy& policy, const OutputSpace& space) {
  const auto m = oracle::from_policy(policy);
  int hits = 0;
  for (int x = 0; x < space.prompts; ++x) {
    const auto p = oracle::probs(m, x);
    int best = 0;
    for (int y = 1; y < space.outputs; ++y) {
      if (p[static_cast<std::size_t>(y)] > p[static_cast<std::size_t>(best)]) best = y;
    }
    hits += space.is_correct(x, best) ? 1 : 0;
  }
  return static_cast<double>(hits) / space.prompts;
}

}  // namespace

TEST(Probe, TaskShape) {
  std::mt19937_64 rng(0);
  const auto probe = make_probe_task(rng);
  EXPECT_EQ(probe.task.space.prompts, 1);
  EXPECT_EQ(probe.task.space.outputs, 64);
  ASSERT_TRUE(probe.task.features.has_value());
  EXPECT_EQ(probe.task.features->rows(), 64);
  // correct: first token 1, last token not 3
  for (int y = 0; y < 64; ++y) {
    const int first = y / 16;
    const int last = y % 4;
    EXPECT_EQ(probe.task.space.is_correct(0, y), first == 1 && last != 3) << y;
  }
  // The memorized sequence is the initial argmax and is incorrect.
  const int top = argmax_output(probe.policy, 0);
  EXPECT_FALSE(probe.task.space.is_correct(0, top));
  EXPECT_EQ(probe.policy.params().theta(), Eigen::VectorXd::Zero(probe.policy.block_size()));
}

TEST(Probe, DatasetHas25TriplesAndExcludesYstar) {
  std::mt19937_64 rng(1);
  const auto probe = make_probe_task(rng);
  std::mt19937_64 drng(2);
  const auto data = generate_probe_dataset(probe.policy, probe.task.space, 500, 5, drng);
  ASSERT_EQ(data.prompts.size(), 1u);
  const auto& s = data.prompts[0];
  EXPECT_EQ(data.triples.size(), 25u);
  EXPECT_EQ(s.d_w.size(), 5u);
  EXPECT_EQ(s.d_l.size(), 5u);
  EXPECT_EQ(s.ystar, argmax_output(probe.policy, 0));
  EXPECT_EQ(std::count(s.d_l.begin(), s.d_l.end(), s.ystar), 0);
  for (int y : s.d_w) EXPECT_TRUE(probe.task.space.is_correct(0, y));
  for (int y : s.d_l) EXPECT_FALSE(probe.task.space.is_correct(0, y));
  // most probable first
  for (std::size_t i = 1; i < s.d_w.size(); ++i) {
    EXPECT_GE(probe.policy.prob(0, s.d_w[i - 1]), probe.policy.prob(0, s.d_w[i]));
  }
  // closure: every (w, l) pair of the sets, nothing else
  std::set<std::pair<int, int>> pairs;
  for (const auto& t : data.triples) pairs.insert({t.y_w, t.y_l});
  EXPECT_EQ(pairs.size(), 25u);
  for (int w : s.d_w) {
    for (int l : s.d_l) EXPECT_TRUE(pairs.count({w, l}));
  }
  EXPECT_EQ(data.sft_pairs.size(), 5u);
}

TEST(Probe, DatasetIsDeterministic) {
  std::mt19937_64 rng(3);
  const auto probe = make_probe_task(rng);
  std::mt19937_64 a(4);
  std::mt19937_64 b(4);
  const auto da = generate_probe_dataset(probe.policy, probe.task.space, 500, 5, a);
  const auto db = generate_probe_dataset(probe.policy, probe.task.space, 500, 5, b);
  EXPECT_EQ(da.triples, db.triples);
}

TEST(Probe, DegeneratePolicyFails) {
  const auto space = OutputSpace::from_correct_sets(1, 4, {{0}});
  Eigen::VectorXd theta(4);
  theta << 0.0, -900.0, -900.0, -900.0;
  const auto pol = SplitPolicy::tabular(1, 4, theta, Eigen::VectorXd::Zero(4));
  std::mt19937_64 rng(5);
  EXPECT_THROW(generate_probe_dataset(pol, space, 500, 1, rng), GenerationError);
}

TEST(Displacement, CertificateHolds) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    std::mt19937_64 rng(s);
    DisplacementParams params;
    const auto task = generate_displacement_prone(params, rng);
    EXPECT_EQ(task.triple, (PreferenceTriple{0, 0, 1}));
    EXPECT_GE(task.candidates_tried, 1);
    EXPECT_LE(task.candidates_tried, params.budget);
    const auto geo = gradient_geometry(task.policy, task.policy, task.triple, 0.5);
    EXPECT_EQ(classify(geo), CaseLabel::case1);
    EXPECT_NE(task.ystar, 0);
    EXPECT_NE(task.ystar, 1);
    EXPECT_GE(task.policy.prob(0, task.ystar), params.min_ystar_mass);
    EXPECT_EQ(task.policy.params().theta(), Eigen::VectorXd::Zero(task.policy.block_size()));
    EXPECT_TRUE(task.task.space.is_correct(0, 0));
    EXPECT_EQ(task.task.space.correct_outputs(0).size(), 1u);
    const auto d = measure_deltas(task.policy, task.policy, task.triple, 0.1, 0.5);
    EXPECT_LT(d(0), 0.0);
    EXPECT_LE(d(1), 0.0);
    EXPECT_GT(d(task.ystar), 0.0);
  }
}

TEST(Displacement, TabularRequestRejected) {
  DisplacementParams params;
  params.kind = PolicyKind::tabular;
  std::mt19937_64 rng(0);
  EXPECT_THROW(generate_displacement_prone(params, rng), std::invalid_argument);
  params.kind = PolicyKind::log_linear;
  params.feature_dim = 1;
  EXPECT_THROW(generate_displacement_prone(params, rng), std::invalid_argument);
}

TEST(Displacement, ExhaustedBudget) {
  DisplacementParams params;
  params.min_ystar_mass = 0.999;
  params.budget = 20;
  std::mt19937_64 rng(0);
  EXPECT_THROW(generate_displacement_prone(params, rng), SearchExhaustedError);
}

TEST(Jsonl, RoundTrip100Triples) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> d(0, 9);
  std::vector<PreferenceTriple> ts;
  while (ts.size() < 100) {
    PreferenceTriple t{d(rng), d(rng), d(rng)};
    if (t.y_w != t.y_l) ts.push_back(t);
  }
  const auto path = temp_file("triples.jsonl");
  save_jsonl(path, ts);
  EXPECT_EQ(load_triples_jsonl(path), ts);

  const std::vector<SftPair> ps{{0, 1}, {3, 2}};
  const auto sp = temp_file("sft.jsonl");
  save_jsonl(sp, ps);
  EXPECT_EQ(load_sft_jsonl(sp), ps);
}

TEST(Jsonl, EqualOutputsRejected) {
  const auto path = temp_file("equal.jsonl");
  write_text(path, "{\"x\":0,\"y_w\":1,\"y_l\":1}\n");
  EXPECT_THROW(load_triples_jsonl(path), ValidationError);
}

TEST(Jsonl, EmptyFileIsEmptyDataset) {
  const auto path = temp_file("empty.jsonl");
  write_text(path, "");
  EXPECT_TRUE(load_triples_jsonl(path).empty());
  write_text(path, "\n\n");
  EXPECT_TRUE(load_sft_jsonl(path).empty());
}

TEST(Jsonl, MalformedLineReportsLineNumber) {
  const auto path = temp_file("bad.jsonl");
  write_text(path, "{\"x\":0,\"y_w\":1,\"y_l\":2}\n{\"x\":0,\"y_w\":1\n");
  try {
    load_triples_jsonl(path);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  write_text(path, "{\"x\":0,\"y_w\":1,\"y_l\":2,\"extra\":3}\n");
  EXPECT_THROW(load_triples_jsonl(path), ParseError);
  write_text(path, "{\"x\":0.5,\"y_w\":1,\"y_l\":2}\n");
  EXPECT_THROW(load_triples_jsonl(path), ParseError);
}

TEST(Jsonl, OutOfRangeRejected) {
  const auto space = OutputSpace::from_correct_sets(1, 3, {{0}});
  const auto path = temp_file("range.jsonl");
  write_text(path, "{\"x\":0,\"y_w\":0,\"y_l\":3}\n");
  EXPECT_THROW(load_triples_jsonl(path, &space), ValidationError);
  write_text(path, "{\"x\":-1,\"y_w\":0,\"y_l\":1}\n");
  EXPECT_THROW(load_triples_jsonl(path), ValidationError);
  write_text(path, "{\"x\":0,\"y_w\":1}\n");
  EXPECT_THROW(load_sft_jsonl(path, &space), ValidationError);  // incorrect target
}

TEST(Accuracy, Examples) {
  const auto space = OutputSpace::from_correct_sets(1, 4, {{0}});
  const auto uniform = SplitPolicy::tabular(1, 4);
  EXPECT_EQ(accuracy(uniform, space), 1.0);
  Eigen::VectorXd theta(4);
  theta << 0.0, 1.0, 0.0, 0.0;
  EXPECT_EQ(accuracy(SplitPolicy::tabular(1, 4, theta, Eigen::VectorXd::Zero(4)), space), 0.0);
}

TEST(Accuracy, MatchesRecount) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    std::mt19937_64 rng(s);
    RandomTaskParams params;
    params.kind = s % 2 == 0 ? PolicyKind::tabular : PolicyKind::log_linear;
    params.prompts = 5;
    const auto g = generate_random_task(params, rng);
    EXPECT_EQ(accuracy(g.policy, g.task.space), recount_accuracy(g.policy, g.task.space));
  }
}

TEST(Accuracy, SpaceMismatchThrows) {
  const auto space = OutputSpace::from_correct_sets(1, 4, {{0}});
  EXPECT_THROW(accuracy(SplitPolicy::tabular(1, 3), space), std::invalid_argument);
}

TEST(Pairs, AllPairsCoverEveryCorrectIncorrectCombination) {
  const auto space = OutputSpace::from_correct_sets(2, 4, {{0, 2}, {3}});
  const auto ts = all_preference_pairs(space);
  EXPECT_EQ(ts.size(), 2u * 2u + 1u * 3u);
  for (const auto& t : ts) {
    EXPECT_TRUE(space.is_correct(t.x, t.y_w));
    EXPECT_FALSE(space.is_correct(t.x, t.y_l));
  }
  EXPECT_EQ(all_sft_pairs(space).size(), 3u);
}

TEST(TaskJson, RoundTripAndUnknownKeys) {
  std::mt19937_64 rng(9);
  RandomTaskParams params;
  params.kind = PolicyKind::log_linear;
  const auto g = generate_random_task(params, rng);
  const auto back = task_from_json(nlohmann::json::parse(to_json(g.task).dump()));
  EXPECT_EQ(back.space.labels, g.task.space.labels);
  ASSERT_TRUE(back.features.has_value());
  EXPECT_EQ(*back.features, *g.task.features);
  auto doc = to_json(g.task);
  doc["colour"] = 1;
  EXPECT_THROW(task_from_json(doc), ValidationError);
}

TEST(RandomTask, InvariantsHold) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    std::mt19937_64 rng(s);
    const auto g = generate_random_task(RandomTaskParams{}, rng);
    EXPECT_NO_THROW(g.task.validate());
    EXPECT_EQ(g.policy.params().theta(), Eigen::VectorXd::Zero(g.policy.block_size()));
  }
}
