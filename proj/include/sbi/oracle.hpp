#pragma once

// Reference posteriors built from asymptotic Gaussian summary likelihoods
// (MA(2) sample autocovariances, g-and-k order statistics, the toy mean) and a
// tempered SMC sampler that copes with the bimodal MA(2) posterior.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "sbi/draws.hpp"
#include "sbi/mcmc.hpp"
#include "sbi/models.hpp"
#include "sbi/parallel.hpp"
#include "sbi/rng.hpp"

namespace sbi {

struct SummaryMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // already divided by n
};

/// Mean and large-sample covariance of (delta_0, delta_1, delta_2) for unit
/// white-noise variance:
///   Cov(d_k1, d_k2) = (1/n) [sum_h g_h g_{h+k1-k2} + sum_i g_{k1+i} g_{k2-i}]
/// where g_h are the true autocovariances (zero beyond lag 2), both sums over
/// h, i in [-2, 2].
inline SummaryMoments ma2_moments(std::span<const double> theta, std::size_t n) {
  if (theta.size() != 2) throw std::invalid_argument("ma2_moments: theta must have 2 components");
  const double t1 = theta[0], t2 = theta[1];
  if (!(t1 + t2 > -1.0 && t1 - t2 < 1.0 && std::abs(t2) < 1.0)) throw std::invalid_argument("ma2_moments: theta outside the invertibility region");
  if (n == 0) throw std::invalid_argument("ma2_moments: n must be positive");
  const double g[3] = {1.0 + t1 * t1 + t2 * t2, t1 * (1.0 + t2), t2};
  auto acv = [&](int h) { return std::abs(h) <= 2 ? g[std::abs(h)] : 0.0; };
  constexpr int q = 2;
  SummaryMoments m{Eigen::Vector3d(g[0], g[1], g[2]), Eigen::Matrix3d::Zero()};
  for (int k1 = 0; k1 < 3; ++k1) {
    for (int k2 = 0; k2 < 3; ++k2) {
      double s = 0.0;
      for (int h = -q; h <= q; ++h) s += acv(h) * acv(h + k1 - k2);
      for (int i = -q; i <= q; ++i) s += acv(k1 + i) * acv(k2 - i);
      m.cov(k1, k2) = s / static_cast<double>(n);
    }
  }
  return m;
}

/// Asymptotic mean and covariance of sample quantiles at probs:
///   Cov(X_(i), X_(j)) = (min(p_i, p_j) - p_i p_j) / (n f_i f_j),
/// with the density at Q(p) computed as phi(z) / Q'(z), z = Phi^{-1}(p).
inline SummaryMoments gk_order_stat_moments(std::span<const double> theta, std::span<const double> probs, std::size_t n) {
  check_gk(theta);
  if (n == 0) throw std::invalid_argument("gk_order_stat_moments: n must be positive");
  const auto d = static_cast<Eigen::Index>(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!(probs[i] > 0.0 && probs[i] < 1.0) || (i > 0 && !(probs[i] > probs[i - 1]))) {
      throw std::invalid_argument("gk_order_stat_moments: probabilities must be strictly increasing in (0, 1)");
    }
  }
  SummaryMoments m{Eigen::VectorXd(d), Eigen::MatrixXd(d, d)};
  Eigen::VectorXd f(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    const double p = probs[static_cast<std::size_t>(i)];
    const double z = Stream::normal_quantile(p);
    const double dq = gk_quantile_derivative(z, theta);
    if (!(dq > 0.0) || !std::isfinite(dq)) throw std::invalid_argument("invalid gk parameter region");
    m.mean(i) = gk_quantile(z, theta);
    f(i) = std::exp(normal_logpdf(z)) / dq;
  }
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) {
      const double pi = probs[static_cast<std::size_t>(i)], pj = probs[static_cast<std::size_t>(j)];
      m.cov(i, j) = (std::min(pi, pj) - pi * pj) / (static_cast<double>(n) * f(i) * f(j));
    }
  }
  return m;
}

/// log N(s; b(theta), Sigma(theta)/n). The covariance map may be evaluated at a
/// fixed plug-in point instead of theta.
struct GaussianSummaryLikelihood {
  std::function<SummaryMoments(std::span<const double>)> moments;
  std::size_t dim = 0;
  std::optional<Eigen::MatrixXd> fixed_cov;

  static constexpr double kJitter = 1e-10;

  [[nodiscard]] double log_likelihood(std::span<const double> s_obs, std::span<const double> theta) const {
    if (s_obs.size() != dim) throw std::invalid_argument("GaussianSummaryLikelihood: summary dimension mismatch");
    SummaryMoments m = moments(theta);
    Eigen::MatrixXd cov = fixed_cov ? *fixed_cov : m.cov;
    const auto d = static_cast<Eigen::Index>(dim);
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) {
      // near-singular near the boundary of the support
      cov.diagonal().array() += kJitter * cov.trace() / static_cast<double>(d);
      llt.compute(cov);
    }
    if (llt.info() != Eigen::Success) throw std::runtime_error("oracle likelihood: covariance not positive definite");
    Eigen::VectorXd r(d);
    for (Eigen::Index i = 0; i < d; ++i) r(i) = s_obs[static_cast<std::size_t>(i)] - m.mean(i);
    const Eigen::VectorXd u = llt.matrixL().solve(r);
    const double log_det = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    return -0.5 * u.squaredNorm() - 0.5 * log_det - 0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi);
  }
};

/// Oracle likelihood for a model spec. If plug_in is given, the covariance is
/// frozen at that parameter.
inline GaussianSummaryLikelihood oracle_likelihood(const ModelSpec& spec, std::optional<std::vector<double>> plug_in = std::nullopt) {
  GaussianSummaryLikelihood like;
  like.dim = spec.summary_dim();
  const std::size_t n = spec.n;
  switch (spec.model) {
    case ModelId::ma2:
      like.moments = [n](std::span<const double> t) { return ma2_moments(t, n); };
      break;
    case ModelId::gk: {
      const auto probs = quantile_levels(spec.summary);
      like.moments = [n, probs](std::span<const double> t) { return gk_order_stat_moments(t, probs, n); };
      break;
    }
    case ModelId::toy:
      like.moments = [n](std::span<const double> t) {
        return SummaryMoments{Eigen::VectorXd::Constant(1, t[0]), Eigen::MatrixXd::Constant(1, 1, 1.0 / static_cast<double>(n))};
      };
      break;
    case ModelId::stereo: throw std::invalid_argument("no oracle posterior for the stereological model");
  }
  if (plug_in) like.fixed_cov = like.moments(*plug_in).cov;
  return like;
}

/// log N(S_obs; b(theta), Sigma/n) + log prior; -inf outside the prior support.
inline double oracle_log_posterior(const GaussianSummaryLikelihood& like, const ModelSpec& spec, std::span<const double> s_obs,
                                   std::span<const double> theta) {
  const double lp = spec.log_prior(theta);
  if (!(lp > -std::numeric_limits<double>::infinity())) return lp;
  return like.log_likelihood(s_obs, theta) + lp;
}

struct TemperedSMCConfig {
  std::size_t particles = 2000;
  double ess_threshold = 0.5;  // conditional ESS fraction targeted by each step
  std::size_t moves = 5;       // RWM steps per stage
  std::size_t max_stages = 1000;
  std::size_t final_moves = 25;  // RWM steps at t = 1, so few resampling duplicates survive

  void validate() const {
    if (particles < 2) throw std::invalid_argument("TemperedSMCConfig: need at least 2 particles");
    if (!(ess_threshold > 0.0 && ess_threshold < 1.0)) throw std::invalid_argument("TemperedSMCConfig: ESS threshold must be in (0, 1)");
    if (moves == 0 || final_moves == 0) throw std::invalid_argument("TemperedSMCConfig: need at least one move per stage");
    if (max_stages == 0) throw std::invalid_argument("TemperedSMCConfig: max stages must be positive");
  }
};

struct TemperingSchedule {
  std::size_t particles = 0;
  double ess_threshold = 0.0;
  std::vector<double> ladder;  // 0 = t_0 < ... < t_T = 1
  std::vector<double> acceptance;  // mean move acceptance per stage
};

struct TemperedSMCResult {
  DrawSet draws;
  TemperingSchedule schedule;
};

namespace detail {

inline std::vector<std::size_t> systematic_resample(std::span<const double> w, Stream& rng) {
  const std::size_t n = w.size();
  std::vector<std::size_t> idx(n);
  const double u0 = rng.uniform() / static_cast<double>(n);
  double cum = w[0];
  std::size_t j = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = u0 + static_cast<double>(i) / static_cast<double>(n);
    while (u > cum && j + 1 < n) cum += w[++j];
    idx[i] = j;
  }
  return idx;
}

// Fraction-of-N conditional ESS when incrementing temperature by dt from
// equally weighted particles.
inline double conditional_ess(std::span<const double> loglik, double dt) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double l : loglik) mx = std::max(mx, dt * l);
  double s = 0.0, s2 = 0.0;
  for (double l : loglik) {
    const double w = std::exp(dt * l - mx);
    s += w;
    s2 += w * w;
  }
  return s * s / (s2 * static_cast<double>(loglik.size()));
}

}  // namespace detail

/// Anneals prior(theta) * exp(t * loglik(theta)) from t = 0 to 1, choosing each
/// increment by bisection so the conditional ESS equals the threshold, then
/// systematic resampling and RWM moves. loglik is only evaluated inside the
/// prior support.
inline TemperedSMCResult tempered_smc(const LogDensityFn& loglik, const ModelSpec& spec, const TemperedSMCConfig& cfg, Stream rng) {
  cfg.validate();
  const std::size_t n = cfg.particles, d = spec.param_dim();
  std::vector<double> x(n * d), ll(n);
  Stream init = rng.split("init");
  for (std::size_t i = 0; i < n; ++i) {
    Stream r = init.split(i);
    prior_sample_into(spec, r, std::span<double>(&x[i * d], d));
  }
  parallel_for(n, [&](std::size_t i) { ll[i] = loglik(std::span<const double>(&x[i * d], d)); });
  for (double l : ll)
    if (std::isnan(l)) throw std::runtime_error("tempered_smc: NaN log-likelihood");

  TemperingSchedule sched{n, cfg.ess_threshold, {0.0}, {}};
  double t = 0.0;
  std::vector<double> w(n), xn(n * d), lln(n);
  for (std::size_t stage = 1;; ++stage) {
    if (stage > cfg.max_stages) throw std::runtime_error("tempered_smc: temperature ladder exceeded the stage limit");
    // next temperature
    double next = 1.0;
    if (detail::conditional_ess(ll, 1.0 - t) < cfg.ess_threshold) {
      double lo = 0.0, hi = 1.0 - t;
      for (int it = 0; it < 100; ++it) {
        const double mid = 0.5 * (lo + hi);
        (detail::conditional_ess(ll, mid) < cfg.ess_threshold ? hi : lo) = mid;
      }
      next = t + std::max(lo, 1e-12);
      if (next >= 1.0) next = 1.0;
    }
    const double dt = next - t;
    t = next;
    sched.ladder.push_back(t);

    double mx = -std::numeric_limits<double>::infinity();
    for (double l : ll) mx = std::max(mx, dt * l);
    double sw = 0.0;
    for (std::size_t i = 0; i < n; ++i) sw += (w[i] = std::exp(dt * ll[i] - mx));
    for (auto& v : w) v /= sw;
    Stream stage_rng = rng.split(stage);
    Stream rs = stage_rng.split("resample");
    const auto idx = detail::systematic_resample(w, rs);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(&x[idx[i] * d], d, &xn[i * d]);
      lln[i] = ll[idx[i]];
    }
    x.swap(xn);
    ll.swap(lln);

    // proposal: (2.38^2 / d) times the particle covariance
    DrawSet cloud(default_names(d), x, "smc");
    Eigen::MatrixXd cov = cloud.covariance() * (2.38 * 2.38 / static_cast<double>(d));
    cov.diagonal().array() += 1e-12 * std::max(cov.trace(), 1e-300);
    const Eigen::MatrixXd L = cov.llt().matrixL();
    const double temp = t;
    std::vector<std::size_t> accepts(n, 0);
    const bool last = t >= 1.0;
    const std::size_t n_moves = last ? cfg.final_moves : cfg.moves;
    parallel_for(n, [&](std::size_t i) {
      Stream r = stage_rng.split(i + 1);
      std::span<double> xi(&x[i * d], d);
      double lp = spec.log_prior(xi);
      Eigen::VectorXd z(static_cast<Eigen::Index>(d));
      std::vector<double> y(d);
      for (std::size_t m = 0; m < n_moves; ++m) {
        for (auto& v : z) v = r.normal();
        const Eigen::VectorXd step = L * z;
        for (std::size_t c = 0; c < d; ++c) y[c] = xi[c] + step(static_cast<Eigen::Index>(c));
        const double lpy = spec.log_prior(y);
        double lly = -std::numeric_limits<double>::infinity();
        if (lpy > -std::numeric_limits<double>::infinity()) lly = loglik(y);
        const double a = metropolis_accept_probability(lp + temp * ll[i], lpy + temp * lly);
        if (r.uniform() < a) {
          std::copy(y.begin(), y.end(), xi.begin());
          lp = lpy;
          ll[i] = lly;
          ++accepts[i];
        }
      }
    });
    double acc = 0.0;
    for (auto a : accepts) acc += static_cast<double>(a);
    sched.acceptance.push_back(acc / static_cast<double>(n * n_moves));
    if (last) break;
  }
  TemperedSMCResult out{DrawSet(spec.names, std::move(x), "oracle-smc"), std::move(sched)};
  out.draws.seed = rng.key();
  return out;
}

}  // namespace sbi
