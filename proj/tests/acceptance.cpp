// End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. Pass criterion numbers as arguments to run a
// subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sbi/sbi.hpp"
#include "test_support.hpp"

using namespace sbi;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Average ranks with ties sharing the mean rank.
std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t t = i; t <= j; ++t) r[idx[t]] = 0.5 * static_cast<double>(i + j) + 1.0;
    i = j + 1;
  }
  return r;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  const auto rx = ranks(x), ry = ranks(y);
  const double mx = mean_of(rx), my = mean_of(ry);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

std::vector<double> rule_means(const std::vector<ResultRow>& rows, std::size_t n, const std::vector<std::string>& rules, const std::string& metric) {
  std::vector<double> out;
  for (const auto& r : rules) out.push_back(summarize_metric(rows, n, r, metric).mean);
  return out;
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt("%.4g", v[i]);
  return s;
}

std::size_t error_count(const std::vector<ResultRow>& rows) {
  return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const ResultRow& r) { return r.metric == "error"; }));
}

// 1. Closed-form oracle moments.
Outcome oracle_moment_exactness() {
  const std::size_t n = 100;
  const std::vector<double> zero{0.0, 0.0};
  const auto m = ma2_moments(zero, n);
  const double e1 = std::abs(m.cov(0, 0) - 2.0 / static_cast<double>(n)), e2 = std::abs(m.cov(1, 2));
  const std::vector<double> theta{0.0, 1.0, 0.0, 0.0}, probs{0.5};
  const auto g = gk_order_stat_moments(theta, probs, n);
  const double e3 = std::abs(g.cov(0, 0) - std::numbers::pi / (2.0 * static_cast<double>(n)));
  return {e1 <= 1e-12 && e2 <= 1e-12 && e3 <= 1e-10, fmt("|dVar0|=%.2g |Cov12|=%.2g |dVar_median|=%.2g", e1, e2, e3)};
}

// 2. Oracle covariances vs brute-force Monte Carlo.
Outcome moments_vs_simulation() {
  constexpr std::size_t kReps = 100000, kN = 2000;
  double worst = 0.0;
  std::vector<std::vector<double>> reps(kReps);
  const auto ma2 = make_spec(ModelId::ma2, kN);
  parallel_for(kReps, [&](std::size_t r) {
    Stream s = Stream(201).split(r);
    reps[r] = ma2_summaries(ma2_simulate(ma2.truth, kN, s)).values;
  });
  auto mc = sbi::testing::mc_covariance(reps);
  auto m = ma2_moments(ma2.truth, kN);
  for (Eigen::Index a = 0; a < 3; ++a)
    for (Eigen::Index b = a; b < 3; ++b) worst = std::max(worst, std::abs(mc.cov(a, b) - m.cov(a, b)) / mc.sd(a, b));
  const double worst_ma2 = worst;
  const auto gk = make_spec(ModelId::gk, kN);
  parallel_for(kReps, [&](std::size_t r) {
    Stream s = Stream(202).split(r);
    reps[r] = gk_simulate_summaries(gk.truth, kN, SummaryId::octiles, s).values;
  });
  mc = sbi::testing::mc_covariance(reps);
  m = gk_order_stat_moments(gk.truth, quantile_levels(SummaryId::octiles), kN);
  worst = 0.0;
  for (Eigen::Index a = 0; a < m.cov.rows(); ++a)
    for (Eigen::Index b = a; b < m.cov.rows(); ++b) worst = std::max(worst, std::abs(mc.cov(a, b) - m.cov(a, b)) / mc.sd(a, b));
  return {worst_ma2 <= 3.0 && worst <= 3.0, fmt("max |diff|/MC-sd: ma2 %.2f, gk %.2f (limit 3)", worst_ma2, worst)};
}

// 3. kNN estimator calibration on unit Gaussians.
Outcome kld_calibration() {
  constexpr std::size_t kM = 10000, kSeeds = 50;
  std::vector<double> shifted(kSeeds), same(kSeeds);
  for (std::size_t s = 0; s < kSeeds; ++s) {
    Stream rng = Stream(301).split(s);
    std::vector<double> p(kM), q(kM), q0(kM);
    for (auto& v : p) v = rng.normal();
    for (auto& v : q) v = 1.0 + rng.normal();
    for (auto& v : q0) v = rng.normal();
    shifted[s] = knn_kld(p, q, 1).value;
    same[s] = knn_kld(p, q0, 1).value;
  }
  const double a = mean_of(shifted), b = mean_of(same);
  return {std::abs(a - 0.5) <= 0.03 && std::abs(b) <= 0.03, fmt("mean KLD shifted %.4f (0.50 +- 0.03), identical %.4f (0 +- 0.03)", a, b)};
}

// 4. NPE and NLE on the conjugate toy.
Outcome conjugate_end_to_end() {
  const auto spec = make_spec(ModelId::toy, 100);
  Stream data(401);
  const auto s_obs = simulate_summaries(spec, spec.truth, data).values;
  const auto exact = toy_exact_posterior(s_obs[0], spec.n);
  std::vector<double> ref(10000);
  Stream er(402);
  for (auto& v : ref) v = exact.mean + exact.sd * er.normal();
  bool ok = true;
  std::string detail;
  auto judge = [&](const char* name, const DrawSet& d) {
    const double mean_err = std::abs(d.mean()(0) - exact.mean) / exact.sd;
    const double sd_ratio = std::sqrt(d.covariance()(0, 0)) / exact.sd;
    const double kld = knn_kld(ref, d.draws, 1).value;
    ok = ok && mean_err <= 0.1 && std::abs(sd_ratio - 1.0) <= 0.1 && kld <= 0.1;
    detail += fmt("%s: |dmean|/sd %.3f, sd ratio %.3f, KLD %.4f; ", name, mean_err, sd_ratio, kld);
  };
  judge("NPE", run_npe(spec, s_obs, 10000, NPEConfig{}, Stream(403)).draws);
  judge("NLE", run_nle(spec, s_obs, 10000, NLEConfig{}, Stream(404)).draws);
  return {ok, detail};
}

// 5. g-and-k KLD against the oracle decreases along the N-schedule.
Outcome kld_trend() {
  ExperimentConfig c;
  c.model = "gk";
  c.summary = "octiles";
  c.n_values = {100};
  c.replications = 20;
  c.metrics = {"kld"};
  c.master_seed = 501;
  const auto rows = run_experiment(c);
  const auto m = rule_means(rows, 100, c.rules, "kld");
  bool dec = true;
  for (std::size_t i = 1; i < m.size(); ++i) dec = dec && m[i] < m[i - 1];
  const bool ratio = m.front() >= 1.5 * m.back();
  return {dec && ratio && error_count(rows) == 0, fmt("mean KLD by rule n,nlogn,n1.5,n2: %s; errors %zu", join(m).c_str(), error_count(rows))};
}

// 6. Stereological lambda coverage at N=n vs N=n^2.
Outcome coverage_trend() {
  ExperimentConfig c;
  c.model = "stereo";
  c.n_values = {100};
  c.rules = {"n", "n2"};
  c.replications = 50;
  c.metrics = {"coverage"};
  c.master_seed = 601;
  const auto rows = run_experiment(c);
  const double at_n = summarize_metric(rows, 100, "n", "hit90:lambda").mean;
  const double at_n2 = summarize_metric(rows, 100, "n2", "hit90:lambda").mean;
  const bool pass = at_n - at_n2 >= 0.05 - 1e-12 && std::abs(at_n2 - 0.90) <= 0.10 + 1e-12 && error_count(rows) == 0;
  return {pass, fmt("90%% coverage of lambda: N=n %.2f, N=n2 %.2f; errors %zu", at_n, at_n2, error_count(rows))};
}

// 7. MA(2) incompatibility: minor vs extreme.
Outcome incompatibility_contrast() {
  ExperimentConfig c;
  c.model = "ma2";
  c.truth = {0.0, 0.0};
  c.n_values = {100};
  c.replications = 10;
  c.metrics = {"kld"};
  c.master_seed = 701;
  const std::vector<double> idx{1, 2, 3, 4};
  const auto minor = incompatibility_study(c, 0.99);
  const auto extreme = incompatibility_study(c, 0.01);
  const auto mm = rule_means(minor, 100, c.rules, "kld"), me = rule_means(extreme, 100, c.rules, "kld");
  const double rm = spearman(idx, mm), re = spearman(idx, me);
  const std::size_t errs = error_count(minor) + error_count(extreme);
  return {rm <= -0.8 && re > -0.5 && errs == 0,
          fmt("delta0=0.99: KLD %s, rho %.2f (<= -0.8); delta0=0.01: KLD %s, rho %.2f (> -0.5); errors %zu", join(mm).c_str(), rm,
              join(me).c_str(), re, errs)};
}

// 8. NPE draws become Gaussian as n grows.
Outcome bvm_gaussianity() {
  ExperimentConfig c;
  c.model = "ma2";
  c.n_values = {500, 5000};
  c.rules = {"n1.5"};
  c.replications = 1;
  c.metrics = {"gaussianity"};
  c.master_seed = 801;
  const auto rows = run_experiment(c);
  const double g500 = summarize_metric(rows, 500, "n1.5", "gaussianity").mean;
  const double g5000 = summarize_metric(rows, 5000, "n1.5", "gaussianity").mean;
  return {error_count(rows) == 0 && g5000 <= 0.1 && g5000 <= g500,
          fmt("gaussianity KLD: n=500 %.4f, n=5000 %.4f (<= 0.1 and <= n=500); errors %zu", g500, g5000, error_count(rows))};
}

// 9. Byte-identical reruns.
Outcome determinism() {
  ExperimentConfig c;
  c.model = "gk";
  c.n_values = {100};
  c.replications = 2;
  c.draws = 2000;
  c.metrics = {"coverage", "bias", "kld", "gaussianity"};
  c.fit.max_epochs = 30;
  c.oracle.smc.particles = 2000;
  c.master_seed = 901;
  const auto dir = std::filesystem::temp_directory_path() / "sbi_acceptance_determinism";
  std::filesystem::remove_all(dir);
  write_experiment(dir / "a", c, run_experiment(c));
  write_experiment(dir / "b", c, run_experiment(c));
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream s;
    s << f.rdbuf();
    return s.str();
  };
  bool same = true;
  for (const char* f : {"results.csv", "coverage.csv", "summary.csv"}) same = same && slurp(dir / "a" / f) == slurp(dir / "b" / f);
  const auto bytes = slurp(dir / "a" / "results.csv").size();
  std::filesystem::remove_all(dir);
  return {same && bytes > 100, fmt("results.csv %zu bytes, reruns identical: %s", bytes, same ? "yes" : "no")};
}

// 10. Gradient and normalization of the mixture density.
Outcome cde_suites() {
  double worst_grad = 0.0, worst_mass = 0.0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    worst_grad = std::max(worst_grad, sbi::testing::gradient_check_instance(Stream(1001).split(i)).max_relative_error);
    worst_mass = std::max(worst_mass, std::abs(sbi::testing::quadrature_mass_instance(Stream(1002).split(i)) - 1.0));
  }
  return {worst_grad <= 1e-4 && worst_mass <= 1e-3, fmt("max relative gradient error %.2g (<= 1e-4), max |mass-1| %.2g (<= 1e-3)", worst_grad, worst_mass)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"oracle moment exactness", oracle_moment_exactness},
      {"oracle moments vs simulation", moments_vs_simulation},
      {"kNN KLD calibration", kld_calibration},
      {"conjugate end-to-end NPE/NLE", conjugate_end_to_end},
      {"g-and-k KLD decreases with N", kld_trend},
      {"stereo coverage trend", coverage_trend},
      {"MA(2) incompatibility contrast", incompatibility_contrast},
      {"Gaussianity of NPE draws at large n", bvm_gaussianity},
      {"deterministic reruns", determinism},
      {"mixture gradient and normalization", cde_suites},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(static_cast<std::size_t>(std::stoul(argv[i])));
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%s criterion %zu (%s): %s [%.0fs]\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str(), secs);
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
