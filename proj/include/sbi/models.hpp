#pragma once

// Benchmark simulators, summary statistics and priors.
//
// Every simulator is a pure function of (theta, n, stream): the same inputs
// reproduce the same output bit for bit.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <boost/random/poisson_distribution.hpp>

#include "sbi/rng.hpp"

namespace sbi {

enum class ModelId { ma2, gk, stereo, toy };
enum class SummaryId { autocov, octiles, hexadeciles, inclusions, mean };

inline constexpr double kGkC = 0.8;          // g-and-k "c", held fixed
inline constexpr double kStereoThreshold = 5.0;  // nu_0
inline constexpr double kToySupport = 10.0;  // toy prior truncated to [-10, 10]

struct ParamVector {
  std::vector<double> values;
  std::vector<std::string> names;
};

struct SummaryVector {
  std::vector<double> values;
};

struct RawSeries {
  std::vector<double> observations;
};

inline std::string to_string(ModelId m) {
  switch (m) {
    case ModelId::ma2: return "ma2";
    case ModelId::gk: return "gk";
    case ModelId::stereo: return "stereo";
    case ModelId::toy: return "toy";
  }
  return "?";
}

inline std::string to_string(SummaryId s) {
  switch (s) {
    case SummaryId::autocov: return "autocov";
    case SummaryId::octiles: return "octiles";
    case SummaryId::hexadeciles: return "hexadeciles";
    case SummaryId::inclusions: return "inclusions";
    case SummaryId::mean: return "mean";
  }
  return "?";
}

inline ModelId parse_model(std::string_view s) {
  if (s == "ma2") return ModelId::ma2;
  if (s == "gk") return ModelId::gk;
  if (s == "stereo") return ModelId::stereo;
  if (s == "toy" || s == "gaussian-toy") return ModelId::toy;
  throw std::invalid_argument("unknown model id '" + std::string(s) + "'");
}

inline SummaryId parse_summary(std::string_view s) {
  if (s == "autocov") return SummaryId::autocov;
  if (s == "octiles") return SummaryId::octiles;
  if (s == "hexadeciles") return SummaryId::hexadeciles;
  if (s == "inclusions") return SummaryId::inclusions;
  if (s == "mean") return SummaryId::mean;
  throw std::invalid_argument("unknown summary id '" + std::string(s) + "'");
}

inline std::size_t summary_dim(SummaryId s) {
  switch (s) {
    case SummaryId::autocov: return 3;
    case SummaryId::octiles: return 7;
    case SummaryId::hexadeciles: return 15;
    case SummaryId::inclusions: return 4;
    case SummaryId::mean: return 1;
  }
  return 0;
}

inline std::vector<double> quantile_levels(SummaryId s) {
  std::size_t parts = 0;
  if (s == SummaryId::octiles) parts = 8;
  else if (s == SummaryId::hexadeciles) parts = 16;
  else throw std::invalid_argument("summary '" + to_string(s) + "' is not a quantile summary");
  std::vector<double> p(parts - 1);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<double>(i + 1) / static_cast<double>(parts);
  return p;
}

/// Model, summary choice, prior box and ground truth for synthetic studies.
struct ModelSpec {
  ModelId model = ModelId::toy;
  SummaryId summary = SummaryId::mean;
  std::vector<std::string> names;
  std::vector<double> lower;
  std::vector<double> upper;
  std::vector<double> truth;
  std::size_t n = 100;

  [[nodiscard]] std::size_t param_dim() const { return names.size(); }
  [[nodiscard]] std::size_t summary_dim() const { return sbi::summary_dim(summary); }

  /// Support test. The MA(2) prior is the invertibility region inside its box.
  [[nodiscard]] bool in_support(std::span<const double> theta) const {
    if (theta.size() != param_dim()) return false;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      if (!std::isfinite(theta[i]) || theta[i] <= lower[i] || theta[i] >= upper[i]) return false;
    }
    if (model == ModelId::ma2) return theta[0] + theta[1] > -1.0 && theta[0] - theta[1] < 1.0;
    return true;
  }

  [[nodiscard]] double log_prior(std::span<const double> theta) const {
    if (!in_support(theta)) return -std::numeric_limits<double>::infinity();
    switch (model) {
      case ModelId::toy: {
        // N(0,1) truncated at +-10; the truncation mass (~1e-23) is ignored.
        return normal_logpdf(theta[0]);
      }
      case ModelId::ma2: return -std::log(3.0);  // area of the region
      default: {
        double lp = 0.0;
        for (std::size_t i = 0; i < theta.size(); ++i) lp -= std::log(upper[i] - lower[i]);
        return lp;
      }
    }
  }

  void validate() const {
    const std::size_t d = names.size();
    if (d == 0 || lower.size() != d || upper.size() != d) throw std::invalid_argument("model spec: inconsistent parameter dimensions");
    for (std::size_t i = 0; i < d; ++i) {
      if (!std::isfinite(lower[i]) || !std::isfinite(upper[i]) || !(lower[i] < upper[i])) {
        throw std::invalid_argument("model spec: invalid prior bounds for '" + names[i] + "'");
      }
    }
    if (!truth.empty() && (truth.size() != d || !in_support(truth))) {
      throw std::invalid_argument("model spec: true parameter outside prior support");
    }
    if (model == ModelId::gk && summary != SummaryId::octiles && summary != SummaryId::hexadeciles) {
      throw std::invalid_argument("model spec: gk needs octiles or hexadeciles");
    }
  }
};

/// Default spec for a model id. Summary defaults to the model's canonical choice.
inline ModelSpec make_spec(ModelId model, std::size_t n, std::string_view summary = "") {
  ModelSpec s;
  s.model = model;
  s.n = n;
  switch (model) {
    case ModelId::ma2:
      s.summary = SummaryId::autocov;
      s.names = {"theta1", "theta2"};
      s.lower = {-1.0, -1.0};
      s.upper = {1.0, 1.0};
      s.truth = {0.6, 0.2};
      break;
    case ModelId::gk:
      s.summary = SummaryId::octiles;
      s.names = {"A", "B", "g", "k"};
      s.lower = {0.0, 0.0, 0.0, 0.0};
      s.upper = {10.0, 10.0, 10.0, 10.0};
      s.truth = {3.0, 1.0, 2.0, 0.5};
      break;
    case ModelId::stereo:
      s.summary = SummaryId::inclusions;
      s.names = {"lambda", "sigma", "xi"};
      s.lower = {30.0, 0.0, -3.0};
      s.upper = {200.0, 15.0, 3.0};
      s.truth = {100.0, 2.0, 0.1};
      break;
    case ModelId::toy:
      s.summary = SummaryId::mean;
      s.names = {"theta"};
      s.lower = {-kToySupport};
      s.upper = {kToySupport};
      s.truth = {0.5};
      break;
  }
  if (!summary.empty()) s.summary = parse_summary(summary);
  s.validate();
  return s;
}

inline ModelSpec make_spec(std::string_view model, std::size_t n, std::string_view summary = "") {
  return make_spec(parse_model(model), n, summary);
}

inline void prior_sample_into(const ModelSpec& spec, Stream& rng, std::span<double> out) {
  if (out.size() != spec.param_dim()) throw std::invalid_argument("prior_sample: output dimension mismatch");
  if (spec.model == ModelId::toy) {
    do {
      out[0] = rng.normal();
    } while (!spec.in_support(out));
    return;
  }
  constexpr int kMaxAttempts = 1'000'000;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = rng.uniform(spec.lower[i], spec.upper[i]);
    if (spec.in_support(out)) return;
  }
  throw std::runtime_error("prior_sample: degenerate prior region");
}

inline ParamVector prior_sample(const ModelSpec& spec, Stream& rng) {
  ParamVector p{std::vector<double>(spec.param_dim()), spec.names};
  prior_sample_into(spec, rng, p.values);
  return p;
}

// ---------------------------------------------------------------------------
// MA(2)

/// y_t = e_t + theta1 e_{t-1} + theta2 e_{t-2}, with e_{-1}, e_0 drawn fresh so
/// the series is stationary from t = 1.
inline RawSeries ma2_simulate(std::span<const double> theta, std::size_t n, Stream& rng) {
  if (theta.size() != 2) throw std::invalid_argument("ma2_simulate: theta must have 2 components");
  if (n < 3) throw std::invalid_argument("ma2_simulate: n must be at least 3");
  const double t1 = theta[0];
  const double t2 = theta[1];
  RawSeries y;
  y.observations.resize(n);
  double e2 = rng.normal();
  double e1 = rng.normal();
  for (std::size_t t = 0; t < n; ++t) {
    const double e = rng.normal();
    y.observations[t] = e + t1 * e1 + t2 * e2;
    e2 = e1;
    e1 = e;
  }
  return y;
}

/// (delta_0, delta_1, delta_2): lag 0..2 autocovariances about zero, all divided by n.
inline SummaryVector ma2_summaries(const RawSeries& y) {
  const auto& v = y.observations;
  const std::size_t n = v.size();
  if (n < 3) throw std::invalid_argument("ma2_summaries: need at least 3 observations");
  double d0 = 0.0, d1 = 0.0, d2 = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    if (!std::isfinite(v[t])) throw std::invalid_argument("ma2_summaries: non-finite observation");
    d0 += v[t] * v[t];
    if (t >= 1) d1 += v[t] * v[t - 1];
    if (t >= 2) d2 += v[t] * v[t - 2];
  }
  const double inv = 1.0 / static_cast<double>(n);
  return {{d0 * inv, d1 * inv, d2 * inv}};
}

// ---------------------------------------------------------------------------
// g-and-k

inline void check_gk(std::span<const double> theta) {
  if (theta.size() != 4) throw std::invalid_argument("gk: theta must be (A, B, g, k)");
  if (!(theta[1] > 0.0)) throw std::invalid_argument("gk: B must be positive");
}

inline double gk_quantile(double z, std::span<const double> theta) {
  check_gk(theta);
  const double a = theta[0], b = theta[1], g = theta[2], k = theta[3];
  return a + b * (1.0 + kGkC * std::tanh(0.5 * g * z)) * std::pow(1.0 + z * z, k) * z;
}

/// d/dz of gk_quantile.
inline double gk_quantile_derivative(double z, std::span<const double> theta) {
  check_gk(theta);
  const double b = theta[1], g = theta[2], k = theta[3];
  const double th = std::tanh(0.5 * g * z);
  const double skew = 1.0 + kGkC * th;
  const double dskew = kGkC * 0.5 * g * (1.0 - th * th);
  const double w = 1.0 + z * z;
  const double kurt = std::pow(w, k) * z;
  const double dkurt = std::pow(w, k - 1.0) * (1.0 + (2.0 * k + 1.0) * z * z);
  return b * (dskew * kurt + skew * dkurt);
}

/// Linear-interpolation sample quantile of sorted data (Hyndman-Fan type 7).
inline double sorted_quantile(std::span<const double> sorted, double p) {
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

inline SummaryVector gk_simulate_summaries(std::span<const double> theta, std::size_t n, SummaryId summary, Stream& rng) {
  const auto probs = quantile_levels(summary);
  check_gk(theta);
  if (n < 16) throw std::invalid_argument("gk_simulate_summaries: n must be at least 16");
  std::vector<double> x(n);
  for (auto& xi : x) xi = gk_quantile(rng.normal(), theta);
  std::sort(x.begin(), x.end());
  SummaryVector s;
  s.values.reserve(probs.size());
  for (double p : probs) s.values.push_back(sorted_quantile(x, p));
  return s;
}

// ---------------------------------------------------------------------------
// Stereological extremes

struct StereoSample {
  std::size_t inclusions = 0;  // Poisson count before section sampling
  RawSeries diameters;         // retained section diameters, all > nu_0
};

/// Draws the latent inclusion field for observation scale n (window w = n/100)
/// and sections it. Each inclusion has largest diameter V3 = nu_0 + GPD(sigma,
/// xi) and smallest diameter V1 = U1 V3; it is cut by the plane with
/// probability V1 / V3, at a uniform offset Z along the V1 axis, giving a
/// section whose largest diameter is V3 sqrt(1 - Z^2).
inline StereoSample stereo_simulate(std::span<const double> theta, std::size_t n, Stream& rng) {
  if (theta.size() != 3) throw std::invalid_argument("stereo: theta must be (lambda, sigma, xi)");
  const double lambda = theta[0], sigma = theta[1], xi = theta[2];
  if (!(lambda > 0.0) || !(sigma > 0.0) || !std::isfinite(xi)) throw std::invalid_argument("stereo: invalid parameter");
  const double window = static_cast<double>(n) / 100.0;
  StereoSample out;
  if (window > 0.0) {
    boost::random::poisson_distribution<std::size_t, double> count(lambda * window);
    out.inclusions = count(rng);
  }
  for (std::size_t i = 0; i < out.inclusions; ++i) {
    const double u = rng.uniform();
    const double excess = std::abs(xi) < 1e-12 ? -sigma * std::log(u) : sigma / xi * (std::pow(u, -xi) - 1.0);
    const double v3 = kStereoThreshold + excess;
    const double u1 = rng.uniform();
    if (rng.uniform() >= u1) continue;
    const double z = rng.uniform(-1.0, 1.0);
    const double s = v3 * std::sqrt(1.0 - z * z);
    if (s > kStereoThreshold) out.diameters.observations.push_back(s);
  }
  return out;
}

/// (count, log mean, log min, log max) of retained diameters; log nu_0 fills
/// the three log slots when nothing is retained.
inline SummaryVector stereo_summaries(const RawSeries& d) {
  const auto& v = d.observations;
  const double sentinel = std::log(kStereoThreshold);
  if (v.empty()) return {{0.0, sentinel, sentinel, sentinel}};
  double sum = 0.0, lo = v.front(), hi = v.front();
  for (double x : v) {
    sum += x;
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  return {{static_cast<double>(v.size()), std::log(sum / static_cast<double>(v.size())), std::log(lo), std::log(hi)}};
}

inline SummaryVector stereo_simulate_summaries(std::span<const double> theta, std::size_t n, Stream& rng) {
  return stereo_summaries(stereo_simulate(theta, n, rng).diameters);
}

// ---------------------------------------------------------------------------
// Conjugate toy: theta ~ N(0,1), S = mean of n draws from N(theta, 1).

inline SummaryVector toy_simulate_summaries(std::span<const double> theta, std::size_t n, Stream& rng) {
  if (theta.size() != 1) throw std::invalid_argument("toy: theta must be scalar");
  if (n == 0) throw std::invalid_argument("toy: n must be positive");
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += theta[0] + rng.normal();
  return {{sum / static_cast<double>(n)}};
}

struct ToyPosterior {
  double mean;
  double sd;
};

inline ToyPosterior toy_exact_posterior(double s_obs, std::size_t n) {
  const double nn = static_cast<double>(n);
  return {nn * s_obs / (nn + 1.0), 1.0 / std::sqrt(nn + 1.0)};
}

// ---------------------------------------------------------------------------

inline SummaryVector simulate_summaries(const ModelSpec& spec, std::span<const double> theta, Stream& rng) {
  switch (spec.model) {
    case ModelId::ma2: return ma2_summaries(ma2_simulate(theta, spec.n, rng));
    case ModelId::gk: return gk_simulate_summaries(theta, spec.n, spec.summary, rng);
    case ModelId::stereo: return stereo_simulate_summaries(theta, spec.n, rng);
    case ModelId::toy: return toy_simulate_summaries(theta, spec.n, rng);
  }
  throw std::invalid_argument("simulate_summaries: unknown model");
}

}  // namespace sbi
