#include <gtest/gtest.h>

#include <cmath>

#include "vigor/eval.hpp"
#include "vigor/trainer.hpp"

using namespace vigor;

namespace {

std::shared_ptr<const ClassVocab> vocab6() {
  static auto v = std::make_shared<const ClassVocab>(ClassVocab({"chair", "table", "door", "bed", "pillow", "lamp"}));
  return v;
}

Proposal at(int id, int cls, Vec3 c) { return make_proposal(id, cls, {ColoredPoint{c[0], c[1], c[2], 0.5, 0.5, 0.5}}); }

GroundingExample example(Scene s, std::vector<std::string> order, int target) {
  return GroundingExample{std::move(s), "the " + order.back(), std::move(order), std::nullopt, target, std::nullopt};
}

std::vector<GroundingExample> natural_set(std::size_t n, std::uint64_t seed, int min_k, int max_k) {
  GenConfig gen;
  gen.style = SampleStyle::kNatural;
  gen.num_scenes = n;
  gen.num_classes = 6;
  gen.min_proposals = min_k;
  gen.max_proposals = max_k;
  gen.seed = seed;
  std::vector<GroundingExample> out;
  for (const auto& s : generate_dataset(gen)) out.push_back(example_from_sample(s));
  return out;
}

}  // namespace

TEST(Buckets, OrderLength) {
  EXPECT_EQ(order_length_bucket(1), "1");
  EXPECT_EQ(order_length_bucket(2), "2&3");
  EXPECT_EQ(order_length_bucket(3), "2&3");
  EXPECT_EQ(order_length_bucket(5), "4&5");
  EXPECT_EQ(order_length_bucket(6), "6+");
  EXPECT_THROW(order_length_bucket(0), ContractError);
}

TEST(Buckets, Distractors) {
  const Scene four_chairs{"s",
                          {at(0, 0, {0, 0, 0}), at(1, 0, {1, 0, 0}), at(2, 0, {2, 0, 0}), at(3, 0, {3, 0, 0}),
                           at(4, 1, {4, 0, 0})},
                          vocab6()};
  EXPECT_EQ(distractor_count(four_chairs, 2), 3u);
  EXPECT_EQ(distractor_bucket(four_chairs, 2), "hard");
  EXPECT_EQ(distractor_bucket(four_chairs, 4), "easy");
  const Scene single{"s", {at(0, 3, {0, 0, 0})}, vocab6()};
  EXPECT_EQ(distractor_bucket(single, 0), "easy");
  const std::vector<GroundingExample> ds{example(single, {"bed"}, 0)};
  EXPECT_EQ(subset_breakdown(ds, SubsetKey::kOrderLength), (std::vector<std::string>{"1"}));
}

TEST(Buckets, KeyNames) {
  EXPECT_EQ(parse_subset_key("order_length"), SubsetKey::kOrderLength);
  EXPECT_EQ(parse_subset_key(subset_key_name(SubsetKey::kDistractors)), SubsetKey::kDistractors);
  EXPECT_THROW(parse_subset_key("view"), ContractError);
}

TEST(Accuracy, EmptyDatasetThrows) {
  GroundingModel m(ModelConfig{8, 2, 2, 0}, *vocab6());
  EXPECT_THROW(accuracy(m, std::span<const GroundingExample>{}, stored_order_source()), ContractError);
  EXPECT_THROW(accuracy_from_predictions(std::span<const GroundingExample>{}, std::span<const int>{}),
               ContractError);
}

TEST(Accuracy, SingleProposalScenesAreAlwaysRight) {
  GroundingModel m(ModelConfig{8, 2, 2, 0}, *vocab6());
  std::vector<GroundingExample> ds;
  for (int c = 0; c < 6; ++c)
    ds.push_back(example(Scene{"s", {at(0, c, {1, 1, 0})}, vocab6()}, {vocab6()->name(c)}, 0));
  EXPECT_EQ(accuracy(m, ds, stored_order_source()).accuracy, 1.0);
}

TEST(Accuracy, OracleAndAntiOracleScores) {
  const auto ds = natural_set(200, 3, 2, 8);
  Rng rng(1);
  std::vector<Matrix> oracle, anti;
  for (const auto& ex : ds) {
    Matrix s(ex.scene.size(), 1), a(ex.scene.size(), 1);
    for (std::size_t k = 0; k < s.size(); ++k) s[k] = rng.uniform(-1, 0);
    s[static_cast<std::size_t>(ex.target_id)] = 1.0;
    oracle.push_back(s);
    for (std::size_t k = 0; k < a.size(); ++k) a[k] = -s[k];
    anti.push_back(a);
  }
  EXPECT_EQ(accuracy_from_scores(ds, oracle).accuracy, 1.0);
  EXPECT_EQ(accuracy_from_scores(ds, anti).accuracy, 0.0);
}

TEST(Accuracy, ArgmaxTiesGoToLowestId) {
  Matrix s(4, 1);
  s[1] = s[3] = 2.0;
  EXPECT_EQ(argmax_score(s), 1);
  EXPECT_THROW(argmax_score(Matrix(0, 1)), ContractError);
}

TEST(Accuracy, SubsetsPartitionTheDataset) {
  const auto ds = natural_set(300, 4, 3, 9);
  std::vector<int> preds(ds.size());
  Rng rng(2);
  for (std::size_t i = 0; i < ds.size(); ++i) preds[i] = static_cast<int>(rng.index(ds[i].scene.size()));
  const std::vector<SubsetKey> keys{SubsetKey::kOrderLength, SubsetKey::kDistractors};
  const auto r = accuracy_from_predictions(ds, preds, keys);
  ASSERT_EQ(r.subsets.size(), 2u);
  for (const auto& [key, buckets] : r.subsets) {
    std::size_t count = 0, correct = 0;
    for (const auto& [name, stat] : buckets) {
      count += stat.count;
      correct += stat.correct;
      EXPECT_GE(stat.accuracy(), 0.0);
      EXPECT_LE(stat.accuracy(), 1.0);
    }
    EXPECT_EQ(count, ds.size()) << key;
    EXPECT_EQ(correct, r.correct) << key;
  }
  const nlohmann::json j = r;
  EXPECT_EQ(j["count"], ds.size());
  EXPECT_TRUE(j["subsets"].contains("distractors"));
}

TEST(Accuracy, RandomModelIsNearChance) {
  const auto ds = natural_set(2000, 5, 2, 9);
  GroundingModel m(ModelConfig{8, 2, 2, 11}, *vocab6());
  const auto r = accuracy(m, ds, stored_order_source());
  double mean = 0.0, var = 0.0;
  for (const auto& ex : ds) {
    const double p = 1.0 / static_cast<double>(ex.scene.size());
    mean += p;
    var += p * (1.0 - p);
  }
  const double n = static_cast<double>(ds.size());
  mean /= n;
  const double sigma = std::sqrt(var) / n;
  EXPECT_NEAR(r.accuracy, mean, 3.0 * sigma) << "chance " << mean;
}

TEST(Accuracy, ThreadedMatchesSerial) {
  const auto ds = natural_set(40, 6, 2, 8);
  GroundingModel m(ModelConfig{8, 2, 2, 12}, *vocab6());
  const auto a = accuracy(m, ds, stored_order_source(), {}, 1);
  const auto b = accuracy(m, ds, stored_order_source(), {}, 3);
  EXPECT_EQ(a.predictions, b.predictions);
}

TEST(Responses, ShapesAndDeterminism) {
  const auto ds = natural_set(1, 7, 4, 6);
  GroundingModel m(ModelConfig{8, 3, 2, 1}, *vocab6());
  const auto order = trim_pad(ds[0].order, 3);
  const auto r = dump_block_responses(m, ds[0], order);
  ASSERT_EQ(r.size(), 4u);
  for (const auto& v : r) EXPECT_EQ(v.size(), ds[0].scene.size());
  EXPECT_EQ(r, dump_block_responses(m, ds[0], order));
}
