#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "rotaudit/rotation.hpp"

using namespace rotaudit;
using namespace rotaudit::rotation;

namespace {

constexpr double kPi = std::numbers::pi;

// Brute-force KS distance between two empirical CDFs, evaluated at every sample point.
double brute_ks(const std::vector<double>& xs, const std::vector<double>& ys) {
  auto ecdf = [](const std::vector<double>& v, double t) {
    return static_cast<double>(std::count_if(v.begin(), v.end(), [&](double x) { return x <= t; })) / v.size();
  };
  double d = 0.0;
  for (const auto* v : {&xs, &ys})
    for (double t : *v) d = std::max(d, std::abs(ecdf(xs, t) - ecdf(ys, t)));
  return d;
}

std::vector<std::vector<int>> all_perms(int n) {
  std::vector<int> p(n);
  for (int i = 0; i < n; ++i) p[i] = i;
  std::vector<std::vector<int>> out;
  do out.push_back(p);
  while (std::next_permutation(p.begin(), p.end()));
  return out;
}

}  // namespace

TEST(Procrustes, IdentityFit) {
  Rng rng(1);
  const MatD x = random_normal<double>(200, 6, rng);
  const auto fit = fit_procrustes(x, x);
  EXPECT_LT((fit.R - MatD::Identity(6, 6)).norm(), 1e-10);
  EXPECT_LT(fit.residual_mse, 1e-20);
  EXPECT_NEAR(fit.frob_from_identity, 0.0, 1e-10);
  EXPECT_EQ(fit.rank, 6);
  EXPECT_DOUBLE_EQ(fit.det, 1.0);
}

TEST(Procrustes, RecoversPlantedRotationWithOffsets) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const int d = 3 + t;
    const MatD q = haar_sample(d, rng, t % 2 ? 1 : -1);
    const MatD ref = random_normal<double>(400, d, rng);
    RowVecD shift = random_normal<double>(1, d, rng, 5.0);
    const MatD src = (ref * q.transpose()).rowwise() + shift;
    const auto fit = fit_procrustes(src, ref);
    EXPECT_LT((fit.R - q).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((fit.apply(src) - ref).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT(orthogonality_error(fit.R), 1e-12);
    EXPECT_DOUBLE_EQ(fit.det, t % 2 ? 1.0 : -1.0);
  }
}

TEST(Procrustes, BeatsRandomCandidates) {
  Rng rng(3);
  for (int d : {2, 3, 5, 8}) {
    const MatD src = random_normal<double>(50, d, rng);
    const MatD ref = random_normal<double>(50, d, rng) + 0.5 * src;
    const auto fit = fit_procrustes(src, ref);
    const MatD cs = src.rowwise() - fit.mu_src;
    const MatD cr = ref.rowwise() - fit.mu_ref;
    const double best = (cs * fit.R - cr).squaredNorm();
    for (int k = 0; k < 10000; ++k) {
      const MatD o = haar_sample(d, rng, k % 2 ? 1 : -1);
      ASSERT_GE((cs * o - cr).squaredNorm(), best - 1e-9);
    }
  }
}

TEST(Procrustes, ComposesWithGaugeRotations) {
  // fit(src Q1, ref Q2) = Q1^T fit(src, ref) Q2
  Rng rng(4);
  const int d = 7;
  const MatD src = random_normal<double>(100, d, rng);
  const MatD ref = random_normal<double>(100, d, rng) + src;
  const MatD q1 = haar_sample(d, rng);
  const MatD q2 = haar_sample(d, rng);
  const auto base = fit_procrustes(src, ref);
  const auto moved = fit_procrustes(src * q1, ref * q2);
  EXPECT_LT((moved.R - q1.transpose() * base.R * q2).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Procrustes, ReportsRankDeficiency) {
  Rng rng(5);
  MatD src = random_normal<double>(100, 5, rng);
  src.col(4).setZero();
  const auto fit = fit_procrustes(src, src);
  EXPECT_EQ(fit.rank, 4);
  EXPECT_LT(orthogonality_error(fit.R), 1e-12);
}

TEST(Haar, FrobeniusPrediction) {
  EXPECT_DOUBLE_EQ(frob_identity_prediction(64), 8.0 * std::sqrt(2.0));
  EXPECT_NEAR(frob_identity_prediction(512), 32.0, 1e-12);
}

TEST(Haar, SampleStatistics) {
  Rng rng(6);
  for (int d : {3, 8, 32}) {
    double mean_sq = 0.0;
    double mean_trace = 0.0;
    const int n = 2000;
    for (int i = 0; i < n; ++i) {
      const MatD q = haar_sample(d, rng);
      ASSERT_LT(orthogonality_error(q), 1e-12);
      ASSERT_NEAR(determinant(q), 1.0, 1e-10);
      mean_sq += (q - MatD::Identity(d, d)).squaredNorm() / n;
      mean_trace += q.trace() / n;
    }
    // E tr Q = 0 on SO(d), d >= 2, so E ||Q - I||^2 = 2d; Var tr Q = 1.
    EXPECT_NEAR(mean_trace, 0.0, 4.0 / std::sqrt(n));
    EXPECT_NEAR(mean_sq, 2.0 * d, 8.0 / std::sqrt(n));
  }
  EXPECT_NEAR(determinant(haar_sample(6, rng, -1)), -1.0, 1e-10);
}

TEST(Haar, EigenAnglesOfPlaneRotation) {
  for (double theta : {0.3, 1.2, 2.9}) {
    MatD r(2, 2);
    r << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
    const auto a = eigen_angles(r);
    ASSERT_EQ(a.size(), 2u);
    EXPECT_NEAR(a[0], -theta, 1e-12);
    EXPECT_NEAR(a[1], theta, 1e-12);
  }
  EXPECT_THROW(eigen_angles(2.0 * MatD::Identity(3, 3)), std::invalid_argument);
}

TEST(Haar, DensityIntegratesToOne) {
  for (int d = 2; d <= 12; ++d) {
    const int n = 20000;
    double integral = 0.0;
    for (int i = 0; i < n; ++i) {
      const double t = -kPi + (i + 0.5) * 2.0 * kPi / n;
      integral += haar_angle_density(t, d) * 2.0 * kPi / n;
    }
    const double atom = d % 2 ? 1.0 / d : 0.0;
    EXPECT_NEAR(integral + atom, 1.0, 1e-9) << d;
    EXPECT_NEAR(haar_angle_cdf(-kPi, d), 0.0, 1e-12);
    EXPECT_NEAR(haar_angle_cdf(kPi, d), 1.0, 1e-12);
    // cdf is the integral of the density
    double acc = 0.0;
    for (int i = 0; i < n / 2; ++i) acc += haar_angle_density(-kPi + (i + 0.5) * kPi / (n / 2), d) * kPi / (n / 2);
    EXPECT_NEAR(haar_angle_cdf(-1e-15, d), acc, 1e-9);
  }
  // d = 2: uniform
  EXPECT_NEAR(haar_angle_density(0.7, 2), 1.0 / (2.0 * kPi), 1e-15);
}

TEST(Haar, EigenAnglesFollowHaarDensity) {
  Rng rng(7);
  for (int d : {4, 9, 32}) {
    std::vector<double> pooled;
    for (int i = 0; i < 400; ++i) {
      auto a = eigen_angles(haar_sample(d, rng));
      if (d % 2) {
        // drop the forced eigenvalue at 1; the rest follow the continuous part
        auto it = std::min_element(a.begin(), a.end(), [](double x, double y) { return std::abs(x) < std::abs(y); });
        a.erase(it);
      }
      pooled.insert(pooled.end(), a.begin(), a.end());
    }
    const double atom = d % 2 ? 1.0 / d : 0.0;
    auto cont_cdf = [&](double t) {
      return (haar_angle_cdf(t, d) - (t >= 0 ? atom : 0.0)) / (1.0 - atom);
    };
    // eigen-angles come in +- pairs, so the pooled sample is not iid; use a loose bound
    const auto ks = ks_one_sample(pooled, cont_cdf);
    EXPECT_LT(ks.statistic, 0.02) << d;
  }
}

TEST(KS, KolmogorovValues) {
  EXPECT_NEAR(kolmogorov_q(1.0), 0.26999967, 1e-7);
  EXPECT_NEAR(kolmogorov_q(1.36), 0.0494, 1e-3);
  EXPECT_DOUBLE_EQ(kolmogorov_q(0.0), 1.0);
  EXPECT_LT(kolmogorov_q(3.0), 1e-7);
}

TEST(KS, TwoSampleMatchesBruteForce) {
  Rng rng(8);
  std::normal_distribution<double> normal;
  for (int t = 0; t < 20; ++t) {
    std::vector<double> xs(30 + t), ys(17 + 2 * t);
    for (auto& x : xs) x = normal(rng);
    for (auto& y : ys) y = normal(rng) + 0.3;
    if (t % 3 == 0) ys[0] = xs[0];  // ties across samples
    EXPECT_NEAR(ks_two_sample(xs, ys).statistic, brute_ks(xs, ys), 1e-12);
  }
}

TEST(KS, ShiftedUniforms) {
  Rng rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> xs(1000), ys(1000);
  for (auto& x : xs) x = u(rng);
  for (auto& y : ys) y = u(rng) + 0.5;
  const auto r = ks_two_sample(xs, ys);
  EXPECT_NEAR(r.statistic, 0.5, 0.07);
  EXPECT_LT(r.p_value, 1e-10);
}

TEST(KS, SmallStatisticAtPooledSizes) {
  // statistic 0.0027 with 28672 vs 5120 samples
  const double ne = 28672.0 * 5120.0 / (28672.0 + 5120.0);
  EXPECT_GT(kolmogorov_q(std::sqrt(ne) * 0.0027), 0.999);
}

TEST(KS, OneSampleUniform) {
  std::vector<double> xs;
  for (int i = 0; i < 100; ++i) xs.push_back((i + 0.5) / 100.0);
  const auto r = ks_one_sample(xs, [](double t) { return std::clamp(t, 0.0, 1.0); });
  EXPECT_NEAR(r.statistic, 0.005, 1e-12);
  EXPECT_GT(r.p_value, 0.99);
}

TEST(PermutationDistance, SignedPermutationIsZero) {
  Rng rng(10);
  const int d = 12;
  std::vector<int> p(d);
  for (int i = 0; i < d; ++i) p[i] = i;
  std::shuffle(p.begin(), p.end(), rng);
  MatD m = MatD::Zero(d, d);
  for (int i = 0; i < d; ++i) m(i, p[i]) = (i % 3 == 0) ? -1.0 : 1.0;
  const auto r = best_permutation_distance(m);
  EXPECT_NEAR(r.distance, 0.0, 1e-12);
  EXPECT_EQ(r.perm, p);
}

TEST(PermutationDistance, MatchesBruteForce) {
  Rng rng(11);
  const auto perms = all_perms(5);
  for (int t = 0; t < 20; ++t) {
    const MatD q = haar_sample(5, rng);
    double best = 1e300;
    for (const auto& p : perms) {
      // optimal signs given p: sign of each entry
      MatD s = MatD::Zero(5, 5);
      for (int i = 0; i < 5; ++i) s(i, p[i]) = q(i, p[i]) >= 0 ? 1.0 : -1.0;
      best = std::min(best, (q - s).norm());
    }
    EXPECT_NEAR(best_permutation_distance(q).distance, best, 1e-12);
  }
}

TEST(PermutationDistance, HaarControlD64) {
  // Monte-Carlo over 200 draws gives 9.385 (sd 0.04 per draw), about 0.83 of the 11.31 identity distance
  Rng rng(12);
  double mean = 0.0;
  const int n = 100;
  for (int i = 0; i < n; ++i) mean += best_permutation_distance(haar_sample(64, rng)).distance / n;
  EXPECT_LT(mean, std::sqrt(128.0));
  EXPECT_NEAR(mean, 9.385, 0.03);
}

TEST(PermutationDistance, HaarD512IsAboutSevenPercentCloser) {
  Rng rng(13);
  double mean = 0.0;
  for (int i = 0; i < 3; ++i) mean += best_permutation_distance(haar_sample(512, rng)).distance / 3;
  EXPECT_NEAR(mean, 29.6, 0.15);
  EXPECT_NEAR(1.0 - mean / 32.0, 0.07, 0.01);
}
