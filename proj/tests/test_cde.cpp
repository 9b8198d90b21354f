#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "sbi/cde.hpp"
#include "sbi/io.hpp"
#include "test_support.hpp"

namespace {

using sbi::ConditionalMixture;
using sbi::FitConfig;
using sbi::MixtureLayout;
using sbi::Stream;
using sbi::TrainingSet;

TEST(Cde, GradientMatchesCentralDifferences) {
  Stream rng(100);
  for (int inst = 0; inst < 25; ++inst) {
    const auto r = sbi::testing::gradient_check_instance(rng.split(static_cast<std::uint64_t>(inst)));
    EXPECT_LE(r.max_relative_error, 1e-4) << "instance " << inst;
  }
}

TEST(Cde, DensityIntegratesToOne) {
  Stream rng(101);
  for (int inst = 0; inst < 25; ++inst) {
    const double mass = sbi::testing::quadrature_mass_instance(rng.split(static_cast<std::uint64_t>(inst)));
    EXPECT_NEAR(mass, 1.0, 1e-3) << "instance " << inst;
  }
}

TEST(Cde, PeakOfStandardGaussianIncludesJacobian) {
  const std::size_t d = 3;
  MixtureLayout lay{1, d, 2};
  ConditionalMixture m(lay, sbi::Standardizer{{1.0, 2.0, 3.0}, {2.0, 0.5, 4.0}}, sbi::Standardizer{{0.0, 0.0}, {1.0, 1.0}}, 1e-4);
  auto p = m.parameters();
  for (std::size_t a = 0; a < d; ++a) p[lay.scale(0) + MixtureLayout::tri_index(a, a)] = std::log(1.0 - 1e-4);
  const std::vector<double> cond{0.7, -1.2};
  const double lq = m.log_density(std::vector<double>{1.0, 2.0, 3.0}, cond);
  const double expect = -1.5 * std::log(2.0 * std::numbers::pi) - std::log(2.0 * 0.5 * 4.0);
  EXPECT_NEAR(lq, expect, 1e-12);
}

TEST(Cde, FarTailIsFiniteNegative) {
  MixtureLayout lay{3, 2, 1};
  ConditionalMixture m(lay, sbi::Standardizer{{0.0, 0.0}, {1.0, 1.0}}, sbi::Standardizer{{0.0}, {1.0}}, 1e-4);
  const double lq = m.log_density(std::vector<double>{50.0, -50.0}, std::vector<double>{0.0});
  EXPECT_TRUE(std::isfinite(lq));
  EXPECT_LT(lq, -1000.0);
  EXPECT_THROW(m.log_density(std::vector<double>{1.0}, std::vector<double>{0.0}), std::invalid_argument);
}

TEST(Cde, LinearGaussianRegressionRecovered) {
  // theta = 2 S + N(0, 0.25)
  Stream rng(102);
  TrainingSet set(1, 1);
  for (int i = 0; i < 10000; ++i) {
    const double s = rng.normal();
    set.add(std::vector<double>{2.0 * s + 0.5 * rng.normal()}, std::vector<double>{s});
  }
  FitConfig cfg;
  cfg.k = 1;
  const auto [model, report] = sbi::fit(set, cfg, Stream(1));
  EXPECT_NEAR(model.component_slope(0)(0, 0), 2.0, 0.05);
  EXPECT_NEAR(std::sqrt(model.component_covariance(0)(0, 0)), 0.5, 0.02);
  EXPECT_LE(report.train_loss, report.baseline_loss);
}

TEST(Cde, SymmetricTwoComponentMixtureHasEqualGates) {
  Stream rng(103);
  TrainingSet set(1, 0);
  for (int i = 0; i < 10000; ++i) {
    const double centre = (i % 2 == 0) ? 2.0 : -2.0;
    set.add(std::vector<double>{centre + 0.5 * rng.normal()}, std::vector<double>{});
  }
  FitConfig cfg;
  cfg.k = 2;
  const auto [model, report] = sbi::fit(set, cfg, Stream(2));
  const auto pi = model.gate_weights(std::vector<double>{});
  EXPECT_NEAR(pi[0], 0.5, 0.05);
  EXPECT_NEAR(pi[1], 0.5, 0.05);
  EXPECT_NEAR(std::abs(model.component_mean(0, std::vector<double>{})[0]), 2.0, 0.1);
}

TEST(Cde, ConstantImportanceWeightLeavesTrajectoryUnchanged) {
  Stream rng(104);
  TrainingSet a(2, 1), b(2, 1);
  for (int i = 0; i < 500; ++i) {
    const double s = rng.normal();
    const std::vector<double> t{s + rng.normal(), s * s + rng.normal()};
    a.add(t, std::vector<double>{s}, 1.0);
    b.add(t, std::vector<double>{s}, 2.0);
  }
  FitConfig cfg;
  cfg.k = 3;
  cfg.max_epochs = 30;
  const auto [ma, ra] = sbi::fit(a, cfg, Stream(3));
  const auto [mb, rb] = sbi::fit(b, cfg, Stream(3));
  EXPECT_EQ(std::vector<double>(ma.parameters().begin(), ma.parameters().end()),
            std::vector<double>(mb.parameters().begin(), mb.parameters().end()));
  EXPECT_EQ(ra.validation_trace, rb.validation_trace);
}

TEST(Cde, StandardizationInvariance) {
  Stream rng(105);
  TrainingSet a(2, 2), b(2, 2);
  const double scale[2] = {3.0, -0.25}, shift[2] = {5.0, 100.0};
  std::vector<std::pair<std::vector<double>, std::vector<double>>> probes;
  for (int i = 0; i < 400; ++i) {
    const std::vector<double> c{rng.normal(), rng.uniform()};
    const std::vector<double> t{c[0] - c[1] + 0.3 * rng.normal(), std::exp(0.3 * rng.normal())};
    a.add(t, c);
    b.add(std::vector<double>{scale[0] * t[0] + shift[0], scale[1] * t[1] + shift[1]}, c);
    if (i < 20) probes.emplace_back(t, c);
  }
  FitConfig cfg;
  cfg.k = 2;
  cfg.max_epochs = 10;
  const auto [ma, ra] = sbi::fit(a, cfg, Stream(4));
  const auto [mb, rb] = sbi::fit(b, cfg, Stream(4));
  const double log_jac = std::log(std::abs(scale[0] * scale[1]));
  for (const auto& [t, c] : probes) {
    const std::vector<double> tb{scale[0] * t[0] + shift[0], scale[1] * t[1] + shift[1]};
    EXPECT_NEAR(mb.log_density(tb, c), ma.log_density(t, c) - log_jac, 1e-8);
  }
}

TEST(Cde, ValidationLossNeverWorseThanInitial) {
  Stream rng(106);
  TrainingSet set(1, 2);
  for (int i = 0; i < 2000; ++i) {
    const double x0 = rng.normal(), x1 = rng.normal();
    set.add(std::vector<double>{std::sin(x0) + x1 * x1 + 0.2 * rng.normal()}, std::vector<double>{x0, x1});
  }
  FitConfig cfg;
  cfg.k = 4;
  cfg.max_epochs = 60;
  const auto [model, report] = sbi::fit(set, cfg, Stream(5));
  ASSERT_FALSE(report.validation_trace.empty());
  EXPECT_LE(report.validation_trace[report.best_epoch], report.validation_trace.front());
  for (double v : report.validation_trace) EXPECT_TRUE(std::isfinite(v));
  for (std::size_t e = report.best_epoch + 1; e < report.validation_trace.size(); ++e) {
    EXPECT_GE(report.validation_trace[e], report.validation_trace[report.best_epoch]);
  }
  EXPECT_LE(report.train_loss, report.baseline_loss);
}

TEST(Cde, TooFewPairsIsAnError) {
  TrainingSet set(1, 1);
  for (int i = 0; i < 79; ++i) set.add(std::vector<double>{double(i)}, std::vector<double>{double(i % 7)});
  FitConfig cfg;
  EXPECT_THROW(sbi::fit(set, cfg, Stream(1)), std::invalid_argument);
  cfg.k = 0;
  EXPECT_THROW(sbi::fit(set, cfg, Stream(1)), std::invalid_argument);
}

TEST(Cde, NonFiniteTrainingDataRejected) {
  TrainingSet set(1, 1);
  for (int i = 0; i < 100; ++i) set.add(std::vector<double>{double(i)}, std::vector<double>{i == 3 ? NAN : 1.0});
  FitConfig cfg;
  cfg.k = 1;
  EXPECT_THROW(sbi::fit(set, cfg, Stream(1)), std::invalid_argument);
}

TEST(Cde, SampleMomentsMatchSingleComponent) {
  MixtureLayout lay{1, 2, 1};
  ConditionalMixture m(lay, sbi::Standardizer{{1.0, -1.0}, {2.0, 0.5}}, sbi::Standardizer{{0.0}, {1.0}}, 1e-4);
  auto p = m.parameters();
  // mean rows: (slope, intercept)
  p[lay.mean(0) + 0] = 0.5;
  p[lay.mean(0) + 1] = 0.2;
  p[lay.mean(0) + 2] = -0.3;
  p[lay.mean(0) + 3] = 0.0;
  p[lay.scale(0) + 0] = std::log(0.8);
  p[lay.scale(0) + 1] = 0.4;
  p[lay.scale(0) + 2] = std::log(0.6);
  const std::vector<double> cond{1.5};
  const auto mu = m.component_mean(0, cond);
  const Eigen::MatrixXd cov = m.component_covariance(0);
  const std::size_t n = 100000;
  Stream rng(9);
  const auto draws = m.sample(cond, n, rng);
  double s[2] = {0, 0}, ss[3] = {0, 0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    s[0] += draws[2 * i];
    s[1] += draws[2 * i + 1];
  }
  const double m0 = s[0] / n, m1 = s[1] / n;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = draws[2 * i] - m0, b = draws[2 * i + 1] - m1;
    ss[0] += a * a;
    ss[1] += a * b;
    ss[2] += b * b;
  }
  EXPECT_NEAR(m0, mu[0], 3.0 * std::sqrt(cov(0, 0) / n));
  EXPECT_NEAR(m1, mu[1], 3.0 * std::sqrt(cov(1, 1) / n));
  EXPECT_NEAR(ss[0] / (n - 1), cov(0, 0), 3.0 * cov(0, 0) * std::sqrt(2.0 / n));
  EXPECT_NEAR(ss[2] / (n - 1), cov(1, 1), 3.0 * cov(1, 1) * std::sqrt(2.0 / n));
  EXPECT_NEAR(ss[1] / (n - 1), cov(0, 1), 3.0 * std::sqrt((cov(0, 0) * cov(1, 1) + cov(0, 1) * cov(0, 1)) / n));
}

TEST(Cde, DegenerateGateSelectsFirstComponent) {
  MixtureLayout lay{3, 1, 0};
  ConditionalMixture m(lay, sbi::Standardizer{{0.0}, {1.0}}, sbi::Standardizer{}, 1e-4);
  auto p = m.parameters();
  p[lay.gate(0)] = 0.0;
  p[lay.gate(1)] = -800.0;
  p[lay.gate(2)] = -800.0;
  p[lay.mean(0)] = -100.0;
  p[lay.mean(1)] = 0.0;
  p[lay.mean(2)] = 100.0;
  Stream rng(10);
  for (double v : m.sample(std::vector<double>{}, 5000, rng)) ASSERT_LT(v, -90.0);
}

TEST(Cde, JsonRoundTripIsExact) {
  Stream rng(107);
  TrainingSet set(2, 3);
  for (int i = 0; i < 600; ++i) {
    const std::vector<double> c{rng.normal(), rng.normal(), rng.normal()};
    set.add(std::vector<double>{c[0] + rng.normal(), c[1] * c[2] + rng.normal()}, c);
  }
  FitConfig cfg;
  cfg.k = 3;
  cfg.max_epochs = 5;
  const auto [model, report] = sbi::fit(set, cfg, Stream(11));
  const auto text = sbi::to_json(model).dump();
  const auto back = sbi::mixture_from_json(nlohmann::json::parse(text));
  EXPECT_EQ(std::vector<double>(back.parameters().begin(), back.parameters().end()),
            std::vector<double>(model.parameters().begin(), model.parameters().end()));
  const std::vector<double> t{0.1, 0.2}, c{0.3, 0.4, 0.5};
  EXPECT_EQ(back.log_density(t, c), model.log_density(t, c));
  auto bad = nlohmann::json::parse(text);
  bad["version"] = 99;
  EXPECT_THROW(sbi::mixture_from_json(bad), std::invalid_argument);
}

}  // namespace
