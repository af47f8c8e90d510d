#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "adaptor/objective.hpp"
#include "support/gradcheck.hpp"

using namespace adaptor;
using testing_support::gradcheck;
using testing_support::random_tensor;

namespace {

// Direct evaluation of the printed formula in long double.
double oracle_i2t(const Tensor& s, double tau) {
  const auto n = s.rows();
  long double total = 0;
  for (std::size_t k = 0; k < n; ++k) {
    long double denom = 0;
    for (std::size_t j = 0; j < n; ++j) denom += std::exp(static_cast<long double>(s.at(k, j)) / tau);
    total += std::log(std::exp(static_cast<long double>(s.at(k, k)) / tau) / denom);
  }
  return static_cast<double>(-total / static_cast<long double>(n));
}

double oracle_t2i(const Tensor& s, double tau) {
  const auto n = s.rows();
  long double total = 0;
  for (std::size_t k = 0; k < n; ++k) {
    long double denom = 0;
    for (std::size_t j = 0; j < n; ++j) denom += std::exp(static_cast<long double>(s.at(j, k)) / tau);
    total += std::log(std::exp(static_cast<long double>(s.at(k, k)) / tau) / denom);
  }
  return static_cast<double>(-total / static_cast<long double>(n));
}

}  // namespace

TEST(SimilarityMatrix, HandCases) {
  auto eye = Tensor::matrix({{1, 0}, {0, 1}});
  auto swap = Tensor::matrix({{0, 1}, {1, 0}});
  auto s = similarity_matrix(eye, eye);
  EXPECT_EQ(s.at(0, 0), 1.0);
  EXPECT_EQ(s.at(0, 1), 0.0);
  auto s2 = similarity_matrix(eye, swap);
  EXPECT_EQ(s2.at(0, 1), 1.0);
  EXPECT_EQ(s2.at(1, 0), 1.0);
  EXPECT_EQ(s2.at(0, 0), 0.0);
  EXPECT_THROW(similarity_matrix(eye, Tensor::matrix({{1, 0}})), DimensionError);
}

TEST(SimilarityMatrix, Bilinear) {
  std::mt19937_64 rng(1);
  auto x = random_tensor({4, 3}, rng, -1, 1, false);
  auto t = random_tensor({4, 3}, rng, -1, 1, false);
  auto s = similarity_matrix(x, t);
  auto s3 = similarity_matrix(scale(x, 3.0), t);
  for (std::size_t i = 0; i < s.numel(); ++i) EXPECT_NEAR(s3.data()[i], 3.0 * s.data()[i], 1e-14);
}

TEST(InfoNce, SingletonIsZero) {
  auto s = Tensor::matrix({{0.3}});
  EXPECT_EQ(info_nce_i2t(s, 0.07).item(), 0.0);
  EXPECT_EQ(info_nce_t2i(s, 0.07).item(), 0.0);
}

TEST(InfoNce, UniformGivesLogN) {
  for (std::size_t n : {2, 3, 7, 64}) {
    auto s = Tensor::full({n, n}, 0.37);
    for (double tau : {0.01, 0.07, 1.0, 50.0}) {
      EXPECT_NEAR(info_nce_i2t(s, tau).item(), std::log(static_cast<double>(n)), 1e-12);
      EXPECT_NEAR(info_nce_t2i(s, tau).item(), std::log(static_cast<double>(n)), 1e-12);
    }
  }
}

TEST(InfoNce, DiagonalTenHandCase) {
  auto s = Tensor::matrix({{10, 0}, {0, 10}});
  EXPECT_NEAR(info_nce_i2t(s, 1.0).item(), std::log1p(std::exp(-10.0)), 1e-12);
  EXPECT_NEAR(info_nce_i2t(s, 1.0).item(), 4.5399e-5, 1e-8);
}

TEST(InfoNce, MatchesOracle) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> tau_dist(0.05, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(trial % 6);
    auto s = random_tensor({n, n}, rng, -1, 1, false);
    const double tau = tau_dist(rng);
    EXPECT_NEAR(info_nce_i2t(s, tau).item(), oracle_i2t(s, tau), 1e-12);
    EXPECT_NEAR(info_nce_t2i(s, tau).item(), oracle_t2i(s, tau), 1e-12);
  }
}

TEST(InfoNce, TransposeIdentityAndSymmetricInput) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto s = random_tensor({5, 5}, rng, -1, 1, false);
    EXPECT_EQ(info_nce_t2i(s, 0.1).item(), info_nce_i2t(transpose(s), 0.1).item());
    auto sym = add(s, transpose(s));
    EXPECT_EQ(info_nce_t2i(sym, 0.3).item(), info_nce_i2t(sym, 0.3).item());
  }
}

TEST(InfoNce, Errors) {
  auto s = Tensor::matrix({{1, 0}, {0, 1}});
  EXPECT_THROW(info_nce_i2t(s, 0.0), DomainError);
  EXPECT_THROW(info_nce_t2i(s, -1.0), DomainError);
  EXPECT_THROW(info_nce_i2t(Tensor::matrix({{1, 0, 0}, {0, 1, 0}}), 1.0), DimensionError);
  EXPECT_THROW(info_nce_i2t(Tensor::matrix({{std::nan(""), 0}, {0, 1}}), 1.0), NumericError);
}

TEST(InfoNce, NonNegativeAndShiftInvariantPerRow) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto s = random_tensor({6, 6}, rng, -2, 2, false);
    const double base = info_nce_i2t(s, 0.2).item();
    EXPECT_GE(base, 0.0);
    EXPECT_GE(info_nce_t2i(s, 0.2).item(), 0.0);
    auto shifted = s.clone();
    for (std::size_t j = 0; j < 6; ++j) shifted.mutable_data()[2 * 6 + j] += 1.5;
    EXPECT_NEAR(info_nce_i2t(shifted, 0.2).item(), base, 1e-12);
  }
}

TEST(InfoNce, SharpeningDiagonalDecreasesBoth) {
  std::mt19937_64 rng(5);
  auto s = random_tensor({5, 5}, rng, -1, 1, false);
  double prev_i = info_nce_i2t(s, 0.5).item(), prev_t = info_nce_t2i(s, 0.5).item();
  for (int step = 0; step < 5; ++step) {
    for (std::size_t k = 0; k < 5; ++k) s.mutable_data()[k * 5 + k] += 0.3;
    const double i = info_nce_i2t(s, 0.5).item(), t = info_nce_t2i(s, 0.5).item();
    EXPECT_LT(i, prev_i);
    EXPECT_LT(t, prev_t);
    prev_i = i;
    prev_t = t;
  }
}

TEST(InfoNce, JointPermutationInvariance) {
  std::mt19937_64 rng(6);
  auto s = random_tensor({5, 5}, rng, -1, 1, false);
  const std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
  auto p = Tensor::zeros({5, 5});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) p.mutable_data()[i * 5 + j] = s.at(perm[i], perm[j]);
  EXPECT_NEAR(info_nce_i2t(p, 0.3).item(), info_nce_i2t(s, 0.3).item(), 1e-13);
  EXPECT_NEAR(info_nce_t2i(p, 0.3).item(), info_nce_t2i(s, 0.3).item(), 1e-13);
}

TEST(TotalLoss, WeightedSumAndAlphaValidation) {
  std::mt19937_64 rng(7);
  auto s = random_tensor({4, 4}, rng, -1, 1, false);
  auto r = total_loss(s, 0.2, 0.75);
  EXPECT_NEAR(r.total, 0.75 * r.l_i2t + 0.25 * r.l_t2i, 1e-12);
  EXPECT_EQ(r.alpha, 0.75);
  EXPECT_EQ(r.tau, 0.2);
  EXPECT_THROW(total_loss(s, 0.2, 0.0), ConfigError);
  EXPECT_THROW(total_loss(s, 0.2, 1.0), ConfigError);
  EXPECT_NEAR(0.75 * 0.4 + 0.25 * 0.8, 0.5, 1e-15);
}

TEST(TotalLoss, HalfAlphaTransposeInvariantAndEqualBranches) {
  std::mt19937_64 rng(8);
  auto s = random_tensor({5, 5}, rng, -1, 1, false);
  EXPECT_NEAR(total_loss(s, 0.3, 0.5).total, total_loss(transpose(s), 0.3, 0.5).total, 1e-15);
  auto sym = add(s, transpose(s));
  const double l = info_nce_i2t(sym, 0.3).item();
  for (double a : {0.1, 0.5, 0.75, 0.9}) EXPECT_NEAR(total_loss(sym, 0.3, a).total, l, 1e-12);
}

TEST(TotalLoss, Gradcheck) {
  std::mt19937_64 rng(9);
  for (int seed = 0; seed < 5; ++seed) {
    auto s = random_tensor({4, 4}, rng);
    auto log_tau = Tensor::scalar(std::log(0.3), true);
    auto f = [&] { return total_loss(s, exp(log_tau), 0.75).total_tensor; };
    EXPECT_TRUE(gradcheck(f, {s, log_tau}).ok());
  }
}
