#pragma once

// Adaptive Gaussian random-walk Metropolis. The diagonal proposal is tuned
// during burn-in only and frozen afterwards, so retained draws come from a
// time-homogeneous Markov chain.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sbi/draws.hpp"
#include "sbi/rng.hpp"

namespace sbi {

using LogDensityFn = std::function<double(std::span<const double>)>;

struct MCMCConfig {
  std::size_t chain_length = 600000;  // total iterations including burn-in
  double burn_in_fraction = 0.2;      // 10^4 retained draws with the defaults
  double initial_scale = 0.1;         // proposal sd per coordinate before adaptation
  double target_acceptance = 0.234;
  std::size_t thin = 50;              // at 0.234 acceptance leaves almost no repeated draws

  [[nodiscard]] std::size_t burn_in() const {
    return static_cast<std::size_t>(std::floor(burn_in_fraction * static_cast<double>(chain_length)));
  }
  [[nodiscard]] std::size_t retained() const {
    return chain_length > burn_in() ? (chain_length - burn_in() + thin - 1) / thin : 0;
  }

  void validate() const {
    if (!(burn_in_fraction >= 0.0 && burn_in_fraction < 1.0)) throw std::invalid_argument("MCMCConfig: burn-in fraction must be in [0, 1)");
    if (thin == 0) throw std::invalid_argument("MCMCConfig: thin must be positive");
    if (chain_length <= burn_in()) throw std::invalid_argument("MCMCConfig: chain length must exceed burn-in");
    if (!(target_acceptance > 0.0 && target_acceptance < 1.0)) throw std::invalid_argument("MCMCConfig: target acceptance must be in (0, 1)");
    if (!(initial_scale > 0.0) || !std::isfinite(initial_scale)) throw std::invalid_argument("MCMCConfig: initial scale must be positive");
  }
};

struct MCMCResult {
  DrawSet draws;
  double acceptance_rate = 0.0;  // post burn-in
  std::vector<double> proposal_sd;
};

/// Metropolis acceptance probability for a symmetric proposal.
inline double metropolis_accept_probability(double log_current, double log_proposed) {
  if (!(log_proposed > -std::numeric_limits<double>::infinity())) return 0.0;
  const double d = log_proposed - log_current;
  return d >= 0.0 ? 1.0 : std::exp(d);
}

inline std::vector<std::string> default_names(std::size_t d) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < d; ++i) out.push_back("theta" + std::to_string(i + 1));
  return out;
}

/// log_target must return -inf outside the support. Burn-in adapts a global
/// log scale by Robbins-Monro towards the target acceptance and rescales each
/// coordinate by the chain's running sd.
inline MCMCResult rwm_sample(const LogDensityFn& log_target, std::span<const double> init, const MCMCConfig& cfg, Stream rng,
                             std::vector<std::string> names = {}) {
  cfg.validate();
  const std::size_t d = init.size();
  if (d == 0) throw std::invalid_argument("rwm_sample: empty initial state");
  if (names.empty()) names = default_names(d);
  if (names.size() != d) throw std::invalid_argument("rwm_sample: name count mismatch");
  std::vector<double> x(init.begin(), init.end()), y(d);
  double lx = log_target(x);
  if (!std::isfinite(lx)) throw std::invalid_argument("rwm_sample: log target not finite at the initial state");

  const std::size_t burn = cfg.burn_in();
  std::vector<double> sd(d, cfg.initial_scale), run_mean(x), run_m2(d, 0.0);
  double log_lambda = 0.0;
  constexpr std::size_t kWarm = 200;  // iterations before the running sd replaces the initial scale

  std::vector<double> out;
  out.reserve(cfg.retained() * d);
  std::size_t accepted = 0, post = 0;
  for (std::size_t it = 0; it < cfg.chain_length; ++it) {
    const double lambda = std::exp(log_lambda);
    for (std::size_t c = 0; c < d; ++c) y[c] = x[c] + lambda * sd[c] * rng.normal();
    const double ly = log_target(y);
    const double a = metropolis_accept_probability(lx, ly);
    const bool accept = rng.uniform() < a;
    if (accept) {
      x.swap(y);
      lx = ly;
    }
    if (it < burn) {
      const double gamma = std::pow(static_cast<double>(it + 1), -0.6);
      log_lambda += gamma * (a - cfg.target_acceptance);
      const double cnt = static_cast<double>(it + 2);
      for (std::size_t c = 0; c < d; ++c) {
        const double delta = x[c] - run_mean[c];
        run_mean[c] += delta / cnt;
        run_m2[c] += delta * (x[c] - run_mean[c]);
        if (it + 1 >= kWarm) {
          const double s = std::sqrt(run_m2[c] / (cnt - 1.0));
          if (s > 0.0 && std::isfinite(s)) sd[c] = s;
        }
      }
      if (it + 1 == kWarm) log_lambda = std::log(2.38 / std::sqrt(static_cast<double>(d)));
    } else {
      ++post;
      accepted += accept ? 1 : 0;
      if ((it - burn) % cfg.thin == 0) out.insert(out.end(), x.begin(), x.end());
    }
  }
  MCMCResult r{DrawSet(std::move(names), std::move(out), "rwm"), static_cast<double>(accepted) / static_cast<double>(post), {}};
  const double lambda = std::exp(log_lambda);
  for (double s : sd) r.proposal_sd.push_back(lambda * s);
  r.draws.seed = rng.key();
  return r;
}

}  // namespace sbi
