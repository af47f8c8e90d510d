#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "adaptor/eval_probe.hpp"

using namespace adaptor;

namespace {

// Gaussian blobs around well separated centers.
Tensor blobs(std::size_t per_class, std::size_t classes, std::size_t d, double spread, std::uint64_t seed,
             std::vector<std::uint32_t>& labels) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> data;
  labels.clear();
  for (std::size_t i = 0; i < per_class * classes; ++i) {
    const auto c = static_cast<std::uint32_t>(i % classes);
    labels.push_back(c);
    for (std::size_t k = 0; k < d; ++k) data.push_back((k == c ? 5.0 : 0.0) + spread * n(rng));
  }
  return Tensor::from_data({per_class * classes, d}, std::move(data));
}

// O(n^2) pair-counting AUROC.
double auroc_by_pairs(const std::vector<double>& s, const std::vector<std::uint32_t>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

}  // namespace

TEST(Recall, HandCases) {
  auto eye = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  EXPECT_EQ(recall_at_k_from_similarity(eye, 1), 1.0);
  auto rev = Tensor::matrix({{0, 0, 1}, {0, 1, 0}, {1, 0, 0}});
  EXPECT_NEAR(recall_at_k_from_similarity(rev, 1), 1.0 / 3.0, 1e-15);
  // row 0 has one column ahead; row 2 has column 0 ahead and ties column 1
  EXPECT_NEAR(recall_at_k_from_similarity(rev, 2), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(recall_at_k_from_similarity(rev, 3), 1.0);
  // ties: the lower index wins
  auto ties = Tensor::full({3, 3}, 0.5);
  EXPECT_NEAR(recall_at_k_from_similarity(ties, 1), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(recall_at_k_from_similarity(ties, 2), 2.0 / 3.0, 1e-15);
  EXPECT_THROW(recall_at_k_from_similarity(eye, 0), ConfigError);
  EXPECT_THROW(recall_at_k_from_similarity(eye, 4), ConfigError);
  EXPECT_THROW(recall_at_k_from_similarity(Tensor::matrix({{1, 0}}), 1), DimensionError);
}

TEST(Recall, MonotoneInK) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> d(20 * 20);
  for (auto& x : d) x = n(rng);
  auto s = Tensor::from_data({20, 20}, d);
  double prev = 0;
  for (std::size_t k = 1; k <= 20; ++k) {
    const double r = recall_at_k_from_similarity(s, k);
    EXPECT_GE(r, prev);
    prev = r;
  }
  EXPECT_EQ(prev, 1.0);
}

TEST(Recall, FromEmbeddings) {
  auto x = Tensor::matrix({{1, 0}, {0, 1}});
  EXPECT_EQ(recall_at_k(x, x, 1), 1.0);
  EXPECT_EQ(recall_at_k(x, Tensor::matrix({{0, 1}, {1, 0}}), 1), 0.0);
}

TEST(Auroc, PerfectInvertedAndTied) {
  std::vector<std::uint32_t> y = {0, 0, 1, 1};
  EXPECT_EQ(auroc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, y), 1.0);
  EXPECT_EQ(auroc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, y), 0.0);
  EXPECT_EQ(auroc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, y), 0.5);
  EXPECT_THROW(auroc(std::vector<double>{0.1, 0.2}, std::vector<std::uint32_t>{1, 1}), DomainError);
  EXPECT_THROW(auroc(std::vector<double>{0.1}, std::vector<std::uint32_t>{1, 0}), DimensionError);
}

TEST(Auroc, MatchesPairCountingAndIsRankInvariant) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> coarse(0, 6);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> s;
    std::vector<std::uint32_t> y;
    for (int i = 0; i < 25; ++i) {
      y.push_back(i % 3 == 0 ? 1u : 0u);
      s.push_back(coarse(rng) + 0.5 * y.back());  // coarse values force ties
    }
    const double a = auroc(s, y);
    EXPECT_NEAR(a, auroc_by_pairs(s, y), 1e-12);
    std::vector<double> t;
    for (double v : s) t.push_back(std::exp(3.0 * v) - 7.0);
    EXPECT_NEAR(auroc(t, y), a, 1e-12);
  }
}

TEST(Separability, IdenticalFeaturesAndSeparatedBlobs) {
  // all features equal: every sample goes to the lowest-index class
  auto same = Tensor::full({10, 3}, 1.0);
  std::vector<std::uint32_t> y = {0, 1, 0, 1, 0, 1, 0, 1, 0, 1};
  EXPECT_EQ(separability_score(same, y), 0.5);
  std::vector<std::uint32_t> labels;
  auto x = blobs(30, 3, 4, 0.3, 1, labels);
  EXPECT_EQ(separability_score(x, labels), 1.0);
  EXPECT_THROW(separability_score(x, std::vector<std::uint32_t>(90, 0)), ConfigError);
}

TEST(Separability, LeaveOneOutHandCase) {
  // 1-d: class 0 at {0, 2}, class 1 at {3, 4}. Leaving out x=2 moves the
  // class-0 centroid to 0, and 2 is then closer to 3.5.
  auto x = Tensor::from_data({4, 1}, {0, 2, 3, 4});
  std::vector<std::uint32_t> y = {0, 0, 1, 1};
  EXPECT_EQ(separability_score(x, y), 0.75);
  // a singleton class has no centroid without its only member
  EXPECT_EQ(separability_score(Tensor::from_data({3, 1}, {0, 2, 3}), std::vector<std::uint32_t>{0, 0, 1}), 1.0 / 3.0);
}

TEST(StratifiedSubset, PerClassCounts) {
  std::vector<std::uint32_t> y;
  for (int i = 0; i < 100; ++i) y.push_back(static_cast<std::uint32_t>(i % 3));
  auto one = stratified_subset(y, 0.01, 0);
  ASSERT_EQ(one.size(), 3u);
  std::set<std::uint32_t> classes;
  for (auto i : one) classes.insert(y[i]);
  EXPECT_EQ(classes.size(), 3u);
  auto tenth = stratified_subset(y, 0.1, 0);
  EXPECT_EQ(tenth.size(), 9u);  // round(3.4) + round(3.3) + round(3.3)
  EXPECT_TRUE(std::is_sorted(tenth.begin(), tenth.end()));
  EXPECT_EQ(stratified_subset(y, 1.0, 5).size(), 100u);
  EXPECT_EQ(stratified_subset(y, 0.1, 7), stratified_subset(y, 0.1, 7));
}

TEST(Probe, SeparableBlobsAreLearned) {
  std::vector<std::uint32_t> ytr, yte;
  auto xtr = blobs(40, 3, 5, 0.5, 3, ytr);
  auto xte = blobs(40, 3, 5, 0.5, 4, yte);
  auto r = linear_probe(xtr, ytr, xte, yte, ProbeConfig{}, 8);
  EXPECT_GE(r.accuracy, 0.99);
  EXPECT_FALSE(r.auroc);
  EXPECT_EQ(r.train_samples, 120u);
}

TEST(Probe, BinaryTaskReportsAuroc) {
  std::vector<std::uint32_t> ytr, yte;
  auto xtr = blobs(30, 2, 3, 0.5, 5, ytr);
  auto xte = blobs(30, 2, 3, 0.5, 6, yte);
  auto r = linear_probe(xtr, ytr, xte, yte, ProbeConfig{}, 4);
  ASSERT_TRUE(r.auroc);
  EXPECT_GE(*r.auroc, 0.99);
}

TEST(Probe, DeterministicAndValidated) {
  std::vector<std::uint32_t> ytr, yte;
  auto xtr = blobs(10, 3, 4, 2.0, 7, ytr);
  auto xte = blobs(10, 3, 4, 2.0, 8, yte);
  ProbeConfig pc;
  pc.epochs = 20;
  EXPECT_EQ(linear_probe(xtr, ytr, xte, yte, pc, 4).accuracy, linear_probe(xtr, ytr, xte, yte, pc, 4).accuracy);
  EXPECT_THROW(linear_probe(xtr, ytr, xte, yte, pc, 0), ConfigError);
  EXPECT_THROW(linear_probe(xtr, std::vector<std::uint32_t>(30, 1), xte, yte, pc, 4), ConfigError);
  pc.data_fraction = 0.0;
  EXPECT_THROW(linear_probe(xtr, ytr, xte, yte, pc, 4), ConfigError);
}

TEST(Evaluate, LeavesAdaptorUntouched) {
  SynthSpec s;
  s.n_samples = 60;
  s.d_img = 8;
  s.d_txt = 6;
  s.d_latent = 4;
  s.nuisance_dim = 2;
  auto cache = gen_synthetic(s);
  AdaptorConfig c;
  c.d_img = 8;
  c.d_txt = 6;
  c.d_shared = 8;
  c.n_heads = 2;
  c.d_ffn = 8;
  auto params = init_params(c, 1);
  const auto crc = parameter_checksum(params);
  ProbeConfig pc;
  pc.epochs = 30;
  auto rep = evaluate(params, cache, pc);
  EXPECT_TRUE(rep.frozen());
  EXPECT_EQ(parameter_checksum(params), crc);
  EXPECT_EQ(rep.checksum_after, crc);
  for (const auto& t : params.tensors()) EXPECT_TRUE(t.grad().empty());
  EXPECT_EQ(rep.recall_at_k.size(), 3u);
  ASSERT_TRUE(rep.probe_accuracy && rep.probe_accuracy_raw && rep.separability_after);
  EXPECT_EQ(rep.probe_train_samples, 30u);
  auto j = rep.to_json();
  EXPECT_EQ(j["adaptor_frozen"], true);
  EXPECT_EQ(j["parameter_crc32"], crc);

  auto wrong = cache;
  wrong.d_img = 9;
  EXPECT_THROW(evaluate(params, wrong, pc), ConfigError);
}
