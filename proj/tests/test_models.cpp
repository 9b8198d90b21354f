#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sbi/models.hpp"

namespace {

using sbi::Stream;

TEST(Rng, SplitStreamsAreReproducibleAndDistinct) {
  Stream root(42);
  Stream a = root.split(1), b = root.split(1), c = root.split(2);
  for (int i = 0; i < 100; ++i) {
    const auto x = a(), y = b(), z = c();
    EXPECT_EQ(x, y);
    EXPECT_NE(x, z);
  }
  root();
  EXPECT_EQ(root.split(1).key(), Stream(42).split(1).key());
}

TEST(Rng, NormalMoments) {
  Stream rng(7);
  const int m = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < m; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / m, 0.0, 4.0 / std::sqrt(m));
  EXPECT_NEAR(s2 / m, 1.0, 4.0 * std::sqrt(2.0 / m));
}

TEST(Prior, StereoDrawsInsideBoxAndMeanOfLambda) {
  const auto spec = sbi::make_spec("stereo", 100);
  Stream rng(1);
  double sum = 0;
  const int m = 100000;
  for (int i = 0; i < m; ++i) {
    const auto p = sbi::prior_sample(spec, rng);
    ASSERT_GE(p.values[0], 30.0);
    ASSERT_LE(p.values[0], 200.0);
    ASSERT_GE(p.values[1], 0.0);
    ASSERT_LE(p.values[1], 15.0);
    ASSERT_GE(p.values[2], -3.0);
    ASSERT_LE(p.values[2], 3.0);
    sum += p.values[0];
  }
  // mean of U(30, 200) is 115; MC sd is 49 / sqrt(1e5) = 0.16
  EXPECT_NEAR(sum / m, 115.0, 1.0);
}

TEST(Prior, Ma2DrawsSatisfyInvertibilityConstraints) {
  const auto spec = sbi::make_spec("ma2", 100);
  Stream rng(2);
  for (int i = 0; i < 20000; ++i) {
    const auto p = sbi::prior_sample(spec, rng);
    const double t1 = p.values[0], t2 = p.values[1];
    ASSERT_GT(t1, -1.0);
    ASSERT_LT(t1, 1.0);
    ASSERT_GT(t1 + t2, -1.0);
    ASSERT_LT(t1 - t2, 1.0);
  }
}

TEST(Prior, DegenerateRegionIsAnError) {
  auto spec = sbi::make_spec("ma2", 100);
  spec.lower = {-1.0, -1.0};
  spec.upper = {-0.9, -0.9};  // box lies entirely outside the invertibility region
  spec.truth.clear();
  Stream rng(3);
  EXPECT_THROW(sbi::prior_sample(spec, rng), std::runtime_error);
}

TEST(ModelSpec, RejectsBadBoundsAndTruth) {
  auto spec = sbi::make_spec("gk", 100);
  spec.truth = {3.0, 1.0, 2.0, 11.0};
  EXPECT_THROW(spec.validate(), std::invalid_argument);
  spec = sbi::make_spec("gk", 100);
  spec.lower[0] = 20.0;
  EXPECT_THROW(spec.validate(), std::invalid_argument);
  EXPECT_THROW(sbi::make_spec("nope", 10), std::invalid_argument);
  EXPECT_THROW(sbi::make_spec("gk", 10, "deciles"), std::invalid_argument);
}

TEST(Ma2, WhiteNoiseVariance) {
  Stream rng(11);
  const std::vector<double> theta{0.0, 0.0};
  const auto y = sbi::ma2_simulate(theta, 1000000, rng);
  double s2 = 0;
  for (double v : y.observations) s2 += v * v;
  EXPECT_NEAR(s2 / 1e6, 1.0, 0.01);
}

TEST(Ma2, SummaryMeansMatchAutocovariances) {
  // b(theta) = (1 + t1^2 + t2^2, t1 (1 + t2), t2) = (1.29, 0.60, 0.20)
  const std::vector<double> theta{0.5, 0.2};
  Stream rng(12);
  std::array<double, 3> mean{};
  const int reps = 1000;
  for (int r = 0; r < reps; ++r) {
    Stream s = rng.split(static_cast<std::uint64_t>(r));
    const auto sv = sbi::ma2_summaries(sbi::ma2_simulate(theta, 10000, s));
    for (int j = 0; j < 3; ++j) mean[j] += sv.values[j] / reps;
  }
  EXPECT_NEAR(mean[0], 1.29, 0.01);
  EXPECT_NEAR(mean[1], 0.60, 0.01);
  EXPECT_NEAR(mean[2], 0.20, 0.01);
}

TEST(Ma2, DeterministicGivenSeed) {
  const std::vector<double> theta{0.3, -0.1};
  Stream a(99), b(99);
  EXPECT_EQ(sbi::ma2_simulate(theta, 500, a).observations, sbi::ma2_simulate(theta, 500, b).observations);
}

TEST(Ma2, SummariesHandEvaluated) {
  auto s = sbi::ma2_summaries({{1.0, 1.0, 1.0}});
  EXPECT_DOUBLE_EQ(s.values[0], 1.0);
  EXPECT_DOUBLE_EQ(s.values[1], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(s.values[2], 1.0 / 3.0);
  s = sbi::ma2_summaries({{0.0, 0.0, 0.0, 0.0}});
  EXPECT_EQ(s.values, (std::vector<double>{0.0, 0.0, 0.0}));
  const double c = 2.5;
  s = sbi::ma2_summaries({{c, c, c}});
  EXPECT_DOUBLE_EQ(s.values[0], c * c);
  EXPECT_DOUBLE_EQ(s.values[1], 2.0 * c * c / 3.0);
  EXPECT_DOUBLE_EQ(s.values[2], c * c / 3.0);
}

TEST(Ma2, Errors) {
  Stream rng(1);
  const std::vector<double> theta{0.1, 0.1};
  EXPECT_THROW(sbi::ma2_simulate(theta, 2, rng), std::invalid_argument);
  EXPECT_THROW(sbi::ma2_summaries({{1.0, NAN, 1.0}}), std::invalid_argument);
  EXPECT_THROW(sbi::ma2_summaries({{1.0, 1.0}}), std::invalid_argument);
}

TEST(Gk, QuantileSpecialCases) {
  const std::vector<double> normal{0.0, 1.0, 0.0, 0.0};
  for (double z : {-3.0, -0.4, 0.0, 1.7, 4.2}) EXPECT_DOUBLE_EQ(sbi::gk_quantile(z, normal), z);
  const std::vector<double> truth{3.0, 1.0, 2.0, 0.5};
  EXPECT_DOUBLE_EQ(sbi::gk_quantile(0.0, truth), 3.0);
  EXPECT_THROW(sbi::gk_quantile(0.0, std::vector<double>{0.0, 0.0, 1.0, 1.0}), std::invalid_argument);
}

TEST(Gk, QuantileStrictlyIncreasingOnGrid) {
  const std::vector<double> truth{3.0, 1.0, 2.0, 0.5};
  double prev = -INFINITY;
  for (int i = 0; i <= 10000; ++i) {
    const double z = -5.0 + 10.0 * i / 10000.0;
    const double q = sbi::gk_quantile(z, truth);
    ASSERT_GT(q, prev) << "z=" << z;
    prev = q;
  }
}

TEST(Gk, DerivativeMatchesFiniteDifference) {
  Stream rng(5);
  for (int i = 0; i < 200; ++i) {
    const std::vector<double> th{rng.uniform(0, 10), rng.uniform(0.1, 10), rng.uniform(0, 10), rng.uniform(0, 3)};
    const double z = rng.uniform(-3, 3);
    const double h = 1e-6;
    const double fd = (sbi::gk_quantile(z + h, th) - sbi::gk_quantile(z - h, th)) / (2 * h);
    EXPECT_NEAR(sbi::gk_quantile_derivative(z, th), fd, 1e-5 * std::max(1.0, std::abs(fd)));
  }
}

TEST(Gk, NormalCaseOctilesMatchNormalQuantiles) {
  const std::vector<double> normal{0.0, 1.0, 0.0, 0.0};
  Stream rng(21);
  const auto s = sbi::gk_simulate_summaries(normal, 1000000, sbi::SummaryId::octiles, rng);
  const auto p = sbi::quantile_levels(sbi::SummaryId::octiles);
  ASSERT_EQ(s.values.size(), 7u);
  for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(s.values[i], Stream::normal_quantile(p[i]), 0.01);
}

TEST(Gk, SummaryLengthsAndOrdering) {
  const std::vector<double> truth{3.0, 1.0, 2.0, 0.5};
  Stream rng(22);
  for (int r = 0; r < 200; ++r) {
    const auto o = sbi::gk_simulate_summaries(truth, 16 + r, sbi::SummaryId::octiles, rng);
    const auto h = sbi::gk_simulate_summaries(truth, 16 + r, sbi::SummaryId::hexadeciles, rng);
    ASSERT_EQ(o.values.size(), 7u);
    ASSERT_EQ(h.values.size(), 15u);
    for (std::size_t i = 1; i < o.values.size(); ++i) ASSERT_LT(o.values[i - 1], o.values[i]);
    for (std::size_t i = 1; i < h.values.size(); ++i) ASSERT_LT(h.values[i - 1], h.values[i]);
  }
  EXPECT_THROW(sbi::gk_simulate_summaries(truth, 15, sbi::SummaryId::octiles, rng), std::invalid_argument);
  EXPECT_THROW(sbi::gk_simulate_summaries(truth, 100, sbi::SummaryId::mean, rng), std::invalid_argument);
}

// Kolmogorov-Smirnov: theta = (A, B, 0, 0) gives A + B N(0,1).
TEST(Gk, LocationScaleReductionPassesKs) {
  const double a = 1.5, b = 2.0;
  const std::vector<double> th{a, b, 0.0, 0.0};
  Stream rng(23);
  const std::size_t m = 100000;
  std::vector<double> x(m);
  for (auto& v : x) v = sbi::gk_quantile(rng.normal(), th);
  std::sort(x.begin(), x.end());
  double d = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const double f = sbi::normal_cdf((x[i] - a) / b);
    d = std::max({d, f - static_cast<double>(i) / m, static_cast<double>(i + 1) / m - f});
  }
  EXPECT_LT(d, 1.628 / std::sqrt(static_cast<double>(m)));  // 1% critical value
}

TEST(Stereo, ExponentialExcessMean) {
  // xi = 0, sigma = 1: V3 - 5 ~ Exp(1)
  Stream rng(31);
  double sum = 0;
  const int m = 1000000;
  for (int i = 0; i < m; ++i) sum += 5.0 - std::log(rng.uniform());
  EXPECT_NEAR(sum / m, 6.0, 0.01);
}

TEST(Stereo, InclusionCountIsPoisson) {
  const std::vector<double> th{100.0, 2.0, 0.1};
  Stream rng(32);
  double sum = 0;
  const int reps = 10000;
  for (int r = 0; r < reps; ++r) sum += static_cast<double>(sbi::stereo_simulate(th, 100, rng).inclusions);
  EXPECT_NEAR(sum / reps, 100.0, 1.0);
}

TEST(Stereo, RetainedDiametersExceedThresholdAndSummariesHaveFourEntries) {
  Stream rng(33);
  const auto spec = sbi::make_spec("stereo", 300);
  for (int r = 0; r < 300; ++r) {
    const auto th = sbi::prior_sample(spec, rng);
    const auto s = sbi::stereo_simulate(th.values, 300, rng);
    for (double d : s.diameters.observations) ASSERT_GT(d, sbi::kStereoThreshold);
    ASSERT_LE(s.diameters.observations.size(), s.inclusions);
    const auto sv = sbi::stereo_summaries(s.diameters);
    ASSERT_EQ(sv.values.size(), 4u);
    for (double v : sv.values) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(Stereo, EmptySectionUsesSentinel) {
  const auto s = sbi::stereo_summaries({});
  EXPECT_EQ(s.values[0], 0.0);
  for (int i = 1; i < 4; ++i) EXPECT_DOUBLE_EQ(s.values[i], std::log(5.0));
  Stream rng(1);
  EXPECT_THROW(sbi::stereo_simulate(std::vector<double>{100.0, -1.0, 0.0}, 100, rng), std::invalid_argument);
}

TEST(Toy, LawOfLargeNumbers) {
  int hits = 0;
  for (int r = 0; r < 100; ++r) {
    Stream rng(static_cast<std::uint64_t>(1000 + r));
    const auto s = sbi::toy_simulate_summaries(std::vector<double>{0.0}, 1000000, rng);
    hits += std::abs(s.values[0]) < 0.005;
  }
  EXPECT_GE(hits, 99);
  Stream rng(1);
  EXPECT_THROW(sbi::toy_simulate_summaries(std::vector<double>{0.0}, 0, rng), std::invalid_argument);
}

TEST(Toy, ExactPosteriorAlgebra) {
  const auto post = sbi::toy_exact_posterior(0.3, 100);
  EXPECT_DOUBLE_EQ(post.mean, 100.0 * 0.3 / 101.0);
  EXPECT_DOUBLE_EQ(post.sd, 1.0 / std::sqrt(101.0));
}

TEST(Simulate, PureFunctionOfInputs) {
  for (const char* m : {"ma2", "gk", "stereo", "toy"}) {
    const auto spec = sbi::make_spec(m, 200);
    Stream a(5), b(5);
    EXPECT_EQ(sbi::simulate_summaries(spec, spec.truth, a).values, sbi::simulate_summaries(spec, spec.truth, b).values) << m;
  }
}

}  // namespace
