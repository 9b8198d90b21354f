#pragma once

// Sample-based evaluation: k-NN Kullback-Leibler estimates, credible
// intervals, Monte Carlo coverage, posterior-mean bias and a Gaussianity check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "sbi/draws.hpp"
#include "sbi/kdtree.hpp"
#include "sbi/parallel.hpp"
#include "sbi/rng.hpp"

namespace sbi {

struct KLDEstimate {
  double value = 0.0;  // nats
  std::size_t size_p = 0;
  std::size_t size_q = 0;
  std::size_t neighbors = 1;
};

namespace detail {

// Perturbs repeated rows (within and across the two sets) by ~1e-12 relative
// so that no neighbour distance is zero.
inline void jitter_duplicates(std::vector<double>& p, std::vector<double>& q, std::size_t dim) {
  const std::size_t np = p.size() / dim, nq = q.size() / dim;
  auto at = [&](std::size_t i) -> double* { return i < np ? &p[i * dim] : &q[(i - np) * dim]; };
  std::vector<std::size_t> order(np + nq);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto less = [&](std::size_t a, std::size_t b) {
    return std::lexicographical_compare(at(a), at(a) + dim, at(b), at(b) + dim);
  };
  std::sort(order.begin(), order.end(), less);
  Stream rng(0x6b6e6e6b6c64ULL);
  std::vector<double> rep(at(order[0]), at(order[0]) + dim);
  for (std::size_t r = 1; r < order.size(); ++r) {
    double* cur = at(order[r]);
    if (!std::equal(cur, cur + dim, rep.begin())) {
      rep.assign(cur, cur + dim);
      continue;
    }
    for (std::size_t c = 0; c < dim; ++c) cur[c] += 1e-12 * std::max(1.0, std::abs(cur[c])) * rng.normal();
  }
}

}  // namespace detail

/// k-NN estimate of KLD(P || Q) from samples (row-major, same dimension):
///   (d / n) sum_i log(nu_k(i) / rho_k(i)) + log(m / (n - 1))
/// with rho_k the k-th neighbour distance of x_i within P (excluding itself)
/// and nu_k its k-th neighbour distance within Q. Not clamped at zero.
inline KLDEstimate knn_kld(std::span<const double> p_rows, std::span<const double> q_rows, std::size_t dim, std::size_t k = 1) {
  if (dim == 0 || p_rows.size() % dim != 0 || q_rows.size() % dim != 0) throw std::invalid_argument("knn_kld: dimension mismatch");
  const std::size_t n = p_rows.size() / dim, m = q_rows.size() / dim;
  if (k == 0 || n < k + 1 || m < k + 1) throw std::invalid_argument("knn_kld: each sample needs at least k+1 points");
  std::vector<double> p(p_rows.begin(), p_rows.end()), q(q_rows.begin(), q_rows.end());
  detail::jitter_duplicates(p, q, dim);
  const KdTree tp(p, dim), tq(q, dim);
  std::vector<double> terms(n);
  parallel_for(n, [&](std::size_t i) {
    const std::span<const double> x(&p[i * dim], dim);
    terms[i] = std::log(tq.kth_distance(x, k, m) / tp.kth_distance(x, k, i));
  });
  double sum = 0.0;
  for (double t : terms) sum += t;
  KLDEstimate out;
  out.value = static_cast<double>(dim) * sum / static_cast<double>(n) + std::log(static_cast<double>(m) / static_cast<double>(n - 1));
  out.size_p = n;
  out.size_q = m;
  out.neighbors = k;
  return out;
}

inline KLDEstimate knn_kld(const DrawSet& p, const DrawSet& q, std::size_t k = 1) {
  if (p.dim() != q.dim()) throw std::invalid_argument("knn_kld: dimension mismatch");
  if (!p.uniform_weights() || !q.uniform_weights()) throw std::invalid_argument("knn_kld: draw sets must be equally weighted");
  return knn_kld(p.draws, q.draws, p.dim(), k);
}

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  [[nodiscard]] bool contains(double x) const { return lo <= x && x <= hi; }
};

/// Weighted linear-interpolation quantile. Sorted point i sits at cumulative
/// position (w_1 + ... + w_{i-1}) / (1 - w_n); equal weights reduce this to
/// the usual (i - 1) / (n - 1) rule.
inline double weighted_quantile(std::span<const double> values, std::span<const double> weights, double p) {
  const std::size_t n = values.size();
  if (n == 0) throw std::invalid_argument("weighted_quantile: no values");
  if (n == 1) return values[0];
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  double total = 0.0;
  for (double w : weights) total += w;
  const double span = total - weights[order.back()];
  if (!(span > 0.0)) return values[order.back()];
  double cum = 0.0, prev_pos = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double pos = std::min(1.0, cum / span);
    if (pos >= p) {
      if (r == 0 || pos == prev_pos) return values[order[r]];
      const double lo = values[order[r - 1]], hi = values[order[r]];
      return lo + (p - prev_pos) / (pos - prev_pos) * (hi - lo);
    }
    prev_pos = pos;
    cum += weights[order[r]];
  }
  return values[order.back()];
}

/// Equal-tailed interval per parameter.
inline std::vector<Interval> credible_interval(const DrawSet& draws, double level) {
  if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("credible_interval: level must be in (0, 1)");
  if (draws.size() == 0) throw std::invalid_argument("credible_interval: no draws");
  const double tail = 0.5 * (1.0 - level);
  std::vector<Interval> out(draws.dim());
  for (std::size_t c = 0; c < draws.dim(); ++c) {
    const auto col = draws.column(c);
    out[c] = {weighted_quantile(col, draws.weights, tail), weighted_quantile(col, draws.weights, 1.0 - tail)};
  }
  return out;
}

inline const std::vector<double>& default_levels() {
  static const std::vector<double> levels{0.80, 0.90, 0.95};
  return levels;
}

/// intervals[level][parameter] for one replication.
using IntervalSet = std::vector<std::vector<Interval>>;

inline IntervalSet credible_intervals(const DrawSet& draws, std::span<const double> levels) {
  IntervalSet out;
  for (double l : levels) out.push_back(credible_interval(draws, l));
  return out;
}

struct CoverageReport {
  std::vector<double> levels;
  std::size_t replications = 0;
  std::vector<std::vector<std::vector<unsigned char>>> hits;  // [rep][level][param]
  std::vector<std::vector<std::size_t>> hit_counts;           // [level][param]
  std::vector<std::vector<double>> fraction;                  // [level][param]
};

inline CoverageReport coverage(std::span<const IntervalSet> replicated, std::span<const double> levels, std::span<const double> truth) {
  if (replicated.empty()) throw std::invalid_argument("coverage: need at least one replication");
  CoverageReport r;
  r.levels.assign(levels.begin(), levels.end());
  r.replications = replicated.size();
  r.hit_counts.assign(levels.size(), std::vector<std::size_t>(truth.size(), 0));
  for (const auto& rep : replicated) {
    if (rep.size() != levels.size()) throw std::invalid_argument("coverage: level count mismatch");
    auto& h = r.hits.emplace_back(levels.size(), std::vector<unsigned char>(truth.size(), 0));
    for (std::size_t l = 0; l < levels.size(); ++l) {
      if (rep[l].size() != truth.size()) throw std::invalid_argument("coverage: parameter count mismatch");
      for (std::size_t c = 0; c < truth.size(); ++c) {
        h[l][c] = rep[l][c].contains(truth[c]) ? 1 : 0;
        r.hit_counts[l][c] += h[l][c];
      }
    }
  }
  r.fraction.assign(levels.size(), std::vector<double>(truth.size(), 0.0));
  for (std::size_t l = 0; l < levels.size(); ++l)
    for (std::size_t c = 0; c < truth.size(); ++c)
      r.fraction[l][c] = static_cast<double>(r.hit_counts[l][c]) / static_cast<double>(r.replications);
  return r;
}

inline std::vector<double> posterior_mean_bias(const DrawSet& draws, std::span<const double> truth) {
  if (draws.size() == 0) throw std::invalid_argument("posterior_mean_bias: no draws");
  if (truth.size() != draws.dim()) throw std::invalid_argument("posterior_mean_bias: dimension mismatch");
  const Eigen::VectorXd m = draws.mean();
  std::vector<double> out(truth.size());
  for (std::size_t c = 0; c < truth.size(); ++c) out[c] = m(static_cast<Eigen::Index>(c)) - truth[c];
  return out;
}

/// kNN-KLD between the draws and a same-size Gaussian sample with the draws'
/// mean and covariance.
inline KLDEstimate gaussianity_kld(const DrawSet& draws, Stream rng, std::size_t k = 1) {
  if (draws.size() < 100) throw std::invalid_argument("gaussianity_kld: need at least 100 draws");
  const Eigen::VectorXd mean = draws.mean();
  const Eigen::MatrixXd cov = draws.covariance();
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  // spread below ~1e-8 of the data's magnitude is rounding noise
  const double magnitude = std::max(mean.cwiseAbs().maxCoeff(), std::sqrt(std::max(cov.diagonal().maxCoeff(), 0.0)));
  if (!(magnitude > 0.0) || llt.info() != Eigen::Success ||
      !(llt.matrixL().toDenseMatrix().diagonal().minCoeff() > 1e-8 * magnitude)) {
    throw std::runtime_error("gaussianity_kld: singular empirical covariance");
  }
  const Eigen::MatrixXd L = llt.matrixL();
  const std::size_t m = draws.size(), d = draws.dim();
  std::vector<double> g(m * d);
  Eigen::VectorXd z(static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < m; ++i) {
    for (auto& v : z) v = rng.normal();
    const Eigen::VectorXd x = mean + L * z;
    for (std::size_t c = 0; c < d; ++c) g[i * d + c] = x(static_cast<Eigen::Index>(c));
  }
  if (draws.uniform_weights()) return knn_kld(draws.draws, g, d, k);
  throw std::invalid_argument("gaussianity_kld: draw set must be equally weighted");
}

}  // namespace sbi
