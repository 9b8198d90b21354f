#pragma once

// Posterior engines: one-shot neural posterior estimation (fit theta | S, then
// sample at S_obs), neural likelihood estimation (fit S | theta, then MCMC on
// prior x fitted likelihood) and a population ABC-SMC baseline.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sbi/cde.hpp"
#include "sbi/draws.hpp"
#include "sbi/mcmc.hpp"
#include "sbi/models.hpp"
#include "sbi/parallel.hpp"
#include "sbi/rng.hpp"

namespace sbi {

/// N prior-predictive pairs (theta_i, S_i), row-major.
struct SimulationBank {
  std::size_t param_dim = 0;
  std::size_t summary_dim = 0;
  std::vector<double> thetas;
  std::vector<double> summaries;
  [[nodiscard]] std::size_t size() const { return param_dim ? thetas.size() / param_dim : 0; }
};

/// Pair i depends only on rng.split(i).
inline SimulationBank simulate_bank(const ModelSpec& spec, std::size_t count, Stream rng) {
  SimulationBank b{spec.param_dim(), spec.summary_dim(), std::vector<double>(count * spec.param_dim()),
                   std::vector<double>(count * spec.summary_dim())};
  parallel_for(count, [&](std::size_t i) {
    Stream r = rng.split(i);
    std::span<double> theta(&b.thetas[i * b.param_dim], b.param_dim);
    prior_sample_into(spec, r, theta);
    const auto s = simulate_summaries(spec, theta, r);
    if (s.values.size() != b.summary_dim) throw std::logic_error("simulate_bank: summary dimension mismatch");
    std::copy(s.values.begin(), s.values.end(), &b.summaries[i * b.summary_dim]);
  });
  return b;
}

inline void check_training_size(std::size_t n_sims, const FitConfig& fit) {
  if (n_sims < 10 * fit.k) {
    throw std::invalid_argument("simulation budget N=" + std::to_string(n_sims) + " is below 10*k=" + std::to_string(10 * fit.k));
  }
}

inline void check_observed(const ModelSpec& spec, std::span<const double> s_obs) {
  if (s_obs.size() != spec.summary_dim()) throw std::invalid_argument("observed summary has the wrong dimension");
  for (double v : s_obs)
    if (!std::isfinite(v)) throw std::invalid_argument("observed summary is not finite");
}

// ---------------------------------------------------------------------------
// NPE

struct NPEConfig {
  FitConfig fit;
  std::size_t draws = 10000;
  std::size_t max_oversample = 100;  // proposals per requested draw before giving up on truncation
};

struct NPEResult {
  ConditionalMixture model;
  FitReport report;
  DrawSet draws;
};

/// Draws from q(theta | s_obs) restricted to the prior support. Proposals that
/// leave the support are discarded and redrawn, up to max_oversample * m
/// proposals; the discarded share is recorded as leaked_fraction. If the
/// budget runs out, fewer than m draws are returned.
inline DrawSet sample_truncated(const ConditionalMixture& model, const ModelSpec& spec, std::span<const double> s_obs, std::size_t m,
                                std::size_t max_oversample, Stream rng) {
  check_observed(spec, s_obs);
  if (m == 0) throw std::invalid_argument("sample_truncated: need at least one draw");
  const std::size_t d = spec.param_dim();
  const std::size_t cap = std::max<std::size_t>(1, max_oversample) * m;
  std::vector<double> kept;
  kept.reserve(m * d);
  std::size_t proposed = 0, accepted = 0;
  for (std::uint64_t batch = 0; accepted < m && proposed < cap; ++batch) {
    const std::size_t want = std::min(cap - proposed, std::max<std::size_t>(m - accepted, 64));
    Stream r = rng.split(batch);
    const auto raw = model.sample(s_obs, want, r);
    for (std::size_t i = 0; i < want && accepted < m; ++i) {
      ++proposed;
      const std::span<const double> row(&raw[i * d], d);
      if (!spec.in_support(row)) continue;
      kept.insert(kept.end(), row.begin(), row.end());
      ++accepted;
    }
  }
  if (accepted == 0) throw std::runtime_error("NPE posterior places no mass inside the prior support");
  DrawSet out(spec.names, std::move(kept), "npe");
  out.leaked_fraction = static_cast<double>(proposed - accepted) / static_cast<double>(proposed);
  out.seed = rng.key();
  return out;
}

inline TrainingSet posterior_training_set(const SimulationBank& bank) {
  TrainingSet t(bank.param_dim, bank.summary_dim, Direction::posterior);
  t.targets = bank.thetas;
  t.conditions = bank.summaries;
  t.weights.assign(bank.size(), 1.0);
  return t;
}

inline TrainingSet likelihood_training_set(const SimulationBank& bank) {
  TrainingSet t(bank.summary_dim, bank.param_dim, Direction::likelihood);
  t.targets = bank.summaries;
  t.conditions = bank.thetas;
  t.weights.assign(bank.size(), 1.0);
  return t;
}

inline NPEResult run_npe(const ModelSpec& spec, std::span<const double> s_obs, std::size_t n_sims, const NPEConfig& cfg, Stream rng) {
  check_observed(spec, s_obs);
  check_training_size(n_sims, cfg.fit);
  const auto bank = simulate_bank(spec, n_sims, rng.split("simulate"));
  auto [model, report] = fit(posterior_training_set(bank), cfg.fit, rng.split("fit"));
  DrawSet draws = sample_truncated(model, spec, s_obs, cfg.draws, cfg.max_oversample, rng.split("sample"));
  draws.simulation_budget = n_sims;
  draws.seed = rng.key();
  return {std::move(model), std::move(report), std::move(draws)};
}

// ---------------------------------------------------------------------------
// NLE

struct NLEConfig {
  FitConfig fit;
  MCMCConfig mcmc;
  double min_acceptance = 0.01;
  std::size_t init_candidates = 1000;  // training parameters scored to start the chain
};

struct NLEResult {
  ConditionalMixture model;
  FitReport report;
  DrawSet draws;
  double acceptance_rate = 0.0;
};

/// MCMC on log p(theta) + log q(s_obs | theta) for a fitted likelihood model.
/// The chain starts at the best-scoring of the candidate parameters.
inline MCMCResult sample_likelihood_posterior(const ConditionalMixture& model, const ModelSpec& spec, std::span<const double> s_obs,
                                              std::span<const double> candidates, const NLEConfig& cfg, Stream rng) {
  check_observed(spec, s_obs);
  const std::vector<double> s(s_obs.begin(), s_obs.end());
  auto log_target = [&](std::span<const double> theta) {
    const double lp = spec.log_prior(theta);
    if (!(lp > -std::numeric_limits<double>::infinity())) return lp;
    return lp + model.log_density(s, theta);
  };
  const std::size_t d = spec.param_dim();
  const std::size_t n_cand = std::min(cfg.init_candidates, candidates.size() / d);
  if (n_cand == 0) throw std::invalid_argument("sample_likelihood_posterior: no starting candidates");
  std::size_t best = 0;
  double best_val = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n_cand; ++i) {
    const double v = log_target(candidates.subspan(i * d, d));
    if (v > best_val) {
      best_val = v;
      best = i;
    }
  }
  if (!std::isfinite(best_val)) throw std::runtime_error("degenerate NL posterior: no finite starting point");
  auto r = rwm_sample(log_target, candidates.subspan(best * d, d), cfg.mcmc, rng, spec.names);
  if (r.acceptance_rate < cfg.min_acceptance) throw std::runtime_error("degenerate NL posterior");
  r.draws.method = "nle";
  return r;
}

inline NLEResult run_nle(const ModelSpec& spec, std::span<const double> s_obs, std::size_t n_sims, const NLEConfig& cfg, Stream rng) {
  check_observed(spec, s_obs);
  check_training_size(n_sims, cfg.fit);
  // one-shot: parameters come from the prior
  const auto bank = simulate_bank(spec, n_sims, rng.split("simulate"));
  auto [model, report] = fit(likelihood_training_set(bank), cfg.fit, rng.split("fit"));
  auto chain = sample_likelihood_posterior(model, spec, s_obs, bank.thetas, cfg, rng.split("mcmc"));
  chain.draws.simulation_budget = n_sims;
  chain.draws.seed = rng.key();
  return {std::move(model), std::move(report), std::move(chain.draws), chain.acceptance_rate};
}

// ---------------------------------------------------------------------------
// ABC-SMC

struct ABCSMCConfig {
  std::size_t particles = 1000;
  double quantile = 0.5;          // next tolerance = this quantile of current distances
  double min_tolerance = 0.0;     // stop once the tolerance reaches this
  double min_improvement = 0.01;  // stop when the relative tolerance decrease falls below this
  std::uint64_t max_simulations = 1'000'000;
  std::size_t max_rounds = 100;   // 1 returns the prior population

  void validate() const {
    if (particles < 100) throw std::invalid_argument("ABCSMCConfig: need at least 100 particles");
    if (!(quantile > 0.0 && quantile < 1.0)) throw std::invalid_argument("ABCSMCConfig: quantile must be in (0, 1)");
    if (max_rounds == 0) throw std::invalid_argument("ABCSMCConfig: need at least one round");
    if (max_simulations < particles) throw std::invalid_argument("ABCSMCConfig: budget smaller than one population");
  }
};

struct ABCResult {
  DrawSet draws;
  std::uint64_t total_simulations = 0;
  std::vector<double> tolerances;  // one per completed round; the first is +inf (prior population)
  std::size_t rounds = 0;
};

namespace detail {

inline double weighted_quantile_of(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] + (h - static_cast<double>(lo)) * (v[lo + 1] - v[lo]);
}

}  // namespace detail

/// Population Monte Carlo ABC: tolerance set adaptively to a quantile of the
/// current population's distances, Gaussian perturbation with twice the
/// weighted particle covariance, Euclidean distance on summaries scaled by the
/// prior-predictive sd of the first population.
inline ABCResult abc_smc(const ModelSpec& spec, std::span<const double> s_obs, const ABCSMCConfig& cfg, Stream rng) {
  cfg.validate();
  check_observed(spec, s_obs);
  const std::size_t P = cfg.particles, d = spec.param_dim(), sd_dim = spec.summary_dim();
  ABCResult out;

  // round 0: prior population, everything accepted
  const auto bank = simulate_bank(spec, P, rng.split("round0"));
  out.total_simulations = P;
  std::vector<double> scale(sd_dim, 1.0);
  for (std::size_t c = 0; c < sd_dim; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < P; ++i) m += bank.summaries[i * sd_dim + c] / static_cast<double>(P);
    for (std::size_t i = 0; i < P; ++i) v += std::pow(bank.summaries[i * sd_dim + c] - m, 2) / static_cast<double>(P - 1);
    if (v > 0.0 && std::isfinite(v)) scale[c] = std::sqrt(v);
  }
  auto distance = [&](std::span<const double> s) {
    double acc = 0.0;
    for (std::size_t c = 0; c < sd_dim; ++c) acc += std::pow((s[c] - s_obs[c]) / scale[c], 2);
    return std::sqrt(acc);
  };
  std::vector<double> theta = bank.thetas, w(P, 1.0 / static_cast<double>(P)), dist(P);
  for (std::size_t i = 0; i < P; ++i) dist[i] = distance(std::span<const double>(&bank.summaries[i * sd_dim], sd_dim));
  out.tolerances.push_back(std::numeric_limits<double>::infinity());
  out.rounds = 1;

  std::vector<double> cdf(P);
  for (std::size_t round = 1; round < cfg.max_rounds; ++round) {
    const double eps = detail::weighted_quantile_of(dist, cfg.quantile);
    const double prev = out.tolerances.back();
    if (!(eps < prev)) break;
    if (std::isfinite(prev) && (prev - eps) / prev < cfg.min_improvement) break;

    DrawSet pop(spec.names, theta, "abc-smc");
    pop.weights = w;
    const Eigen::MatrixXd cov = 2.0 * pop.covariance();
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) throw std::runtime_error("abc_smc: particle covariance is singular");
    const Eigen::MatrixXd L = llt.matrixL();
    const Eigen::MatrixXd prec = llt.solve(Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d)));
    std::partial_sum(w.begin(), w.end(), cdf.begin());

    // propose in fixed-size batches with per-index streams; accept in index order
    Stream round_rng = rng.split(round);
    std::vector<double> new_theta, new_dist;
    new_theta.reserve(P * d);
    std::uint64_t spent = 0;
    bool exhausted = false;
    constexpr std::size_t kBatch = 256;
    for (std::uint64_t batch = 0; new_dist.size() < P; ++batch) {
      if (out.total_simulations + spent >= cfg.max_simulations) {
        exhausted = true;
        break;
      }
      const std::size_t bsize = static_cast<std::size_t>(std::min<std::uint64_t>(kBatch, cfg.max_simulations - out.total_simulations - spent));
      std::vector<double> prop(bsize * d), pd(bsize, std::numeric_limits<double>::infinity());
      std::vector<unsigned char> simulated(bsize, 0);
      parallel_for(bsize, [&](std::size_t j) {
        Stream r = round_rng.split(batch * kBatch + j);
        const double u = r.uniform() * cdf.back();
        const auto pick = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
        const std::size_t src = std::min(pick, P - 1);
        Eigen::VectorXd z(static_cast<Eigen::Index>(d));
        for (auto& v : z) v = r.normal();
        const Eigen::VectorXd step = L * z;
        std::span<double> t(&prop[j * d], d);
        for (std::size_t c = 0; c < d; ++c) t[c] = theta[src * d + c] + step(static_cast<Eigen::Index>(c));
        if (!spec.in_support(t)) return;
        simulated[j] = 1;
        pd[j] = distance(simulate_summaries(spec, t, r).values);
      });
      for (std::size_t j = 0; j < bsize && new_dist.size() < P; ++j) {
        spent += simulated[j];
        if (pd[j] <= eps) {
          new_theta.insert(new_theta.end(), &prop[j * d], &prop[j * d] + d);
          new_dist.push_back(pd[j]);
        }
      }
    }
    out.total_simulations += spent;
    if (exhausted) break;

    // importance weights: prior / mixture of perturbation kernels
    std::vector<double> nw(P);
    parallel_for(P, [&](std::size_t i) {
      const std::span<const double> t(&new_theta[i * d], d);
      double denom = 0.0;
      Eigen::VectorXd diff(static_cast<Eigen::Index>(d));
      for (std::size_t j = 0; j < P; ++j) {
        for (std::size_t c = 0; c < d; ++c) diff(static_cast<Eigen::Index>(c)) = t[c] - theta[j * d + c];
        denom += w[j] * std::exp(-0.5 * diff.dot(prec * diff));
      }
      nw[i] = std::exp(spec.log_prior(t)) / denom;
    });
    double sw = 0.0;
    for (double v : nw) sw += v;
    if (!(sw > 0.0) || !std::isfinite(sw)) throw std::runtime_error("abc_smc: importance weights degenerate");
    double s2 = 0.0;
    for (auto& v : nw) {
      v /= sw;
      s2 += v * v;
    }
    if (1.0 / s2 < 0.05 * static_cast<double>(P)) throw std::runtime_error("abc_smc: particle degeneracy (ESS below 5% of particles)");
    theta.swap(new_theta);
    dist.swap(new_dist);
    w.swap(nw);
    out.tolerances.push_back(eps);
    ++out.rounds;
    if (eps <= cfg.min_tolerance) break;
  }

  out.draws = DrawSet(spec.names, std::move(theta), "abc-smc");
  out.draws.weights = std::move(w);
  out.draws.normalize_weights();
  out.draws.simulation_budget = out.total_simulations;
  out.draws.seed = rng.key();
  return out;
}

}  // namespace sbi
