#pragma once

// Conditional Gaussian mixture of experts q(target | condition) and its
// weighted maximum-likelihood trainer.
//
// In standardized coordinates (x = condition, y = target) component j has
//   gate logit   a_j(x)  = w_j . x + b_j,          pi = softmax(a)
//   mean         mu_j(x) = M_j x + m_j
//   scale        L_j     lower triangular, L_j[i][i] = floor + exp(rho_ji)
// and q(y | x) = sum_j pi_j(x) N(y; mu_j(x), L_j L_j^T).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sbi/rng.hpp"

namespace sbi {

enum class Direction { posterior, likelihood };

/// Per-coordinate z-scoring.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> sd;

  [[nodiscard]] std::size_t dim() const { return mean.size(); }

  static Standardizer fit(std::span<const double> rows, std::size_t dim) {
    Standardizer s{std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)};
    if (dim == 0) return s;
    const std::size_t n = rows.size() / dim;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < dim; ++c) s.mean[c] += rows[i * dim + c];
    for (auto& m : s.mean) m /= static_cast<double>(n);
    std::vector<double> ss(dim, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < dim; ++c) {
        const double d = rows[i * dim + c] - s.mean[c];
        ss[c] += d * d;
      }
    for (std::size_t c = 0; c < dim; ++c) {
      const double sd = n > 1 ? std::sqrt(ss[c] / static_cast<double>(n - 1)) : 0.0;
      s.sd[c] = (sd > 0.0 && std::isfinite(sd)) ? sd : 1.0;
    }
    return s;
  }

  void apply(std::span<const double> in, std::span<double> out) const {
    for (std::size_t c = 0; c < mean.size(); ++c) out[c] = (in[c] - mean[c]) / sd[c];
  }
  void invert(std::span<const double> in, std::span<double> out) const {
    for (std::size_t c = 0; c < mean.size(); ++c) out[c] = in[c] * sd[c] + mean[c];
  }
  [[nodiscard]] double log_jacobian() const {
    double s = 0.0;
    for (double v : sd) s += std::log(v);
    return s;
  }
};

/// N simulated (target, condition) pairs with importance weights K.
struct TrainingSet {
  Direction direction = Direction::posterior;
  std::size_t target_dim = 0;
  std::size_t condition_dim = 0;
  std::vector<double> targets;     // row-major, size() x target_dim
  std::vector<double> conditions;  // row-major, size() x condition_dim
  std::vector<double> weights;

  TrainingSet() = default;
  TrainingSet(std::size_t target_dim_, std::size_t condition_dim_, Direction dir = Direction::posterior)
      : direction(dir), target_dim(target_dim_), condition_dim(condition_dim_) {}

  [[nodiscard]] std::size_t size() const { return weights.size(); }

  void add(std::span<const double> target, std::span<const double> condition, double weight = 1.0) {
    if (target.size() != target_dim || condition.size() != condition_dim) {
      throw std::invalid_argument("TrainingSet::add: dimension mismatch");
    }
    targets.insert(targets.end(), target.begin(), target.end());
    conditions.insert(conditions.end(), condition.begin(), condition.end());
    weights.push_back(weight);
  }

  [[nodiscard]] Standardizer target_stats() const { return Standardizer::fit(targets, target_dim); }
  [[nodiscard]] Standardizer condition_stats() const { return Standardizer::fit(conditions, condition_dim); }

  void validate() const {
    if (size() == 0) throw std::invalid_argument("TrainingSet: empty");
    if (targets.size() != size() * target_dim || conditions.size() != size() * condition_dim) {
      throw std::invalid_argument("TrainingSet: inconsistent storage");
    }
    for (double v : targets)
      if (!std::isfinite(v)) throw std::invalid_argument("TrainingSet: non-finite target");
    for (double v : conditions)
      if (!std::isfinite(v)) throw std::invalid_argument("TrainingSet: non-finite condition");
    for (double w : weights)
      if (!(w > 0.0) || !std::isfinite(w)) throw std::invalid_argument("TrainingSet: weights must be positive");
  }
};

/// Offsets of each parameter block inside the flat parameter vector.
struct MixtureLayout {
  std::size_t k = 1;
  std::size_t dt = 1;
  std::size_t dc = 0;

  [[nodiscard]] std::size_t tri() const { return dt * (dt + 1) / 2; }
  [[nodiscard]] std::size_t gate_block() const { return dc + 1; }
  [[nodiscard]] std::size_t mean_block() const { return dt * (dc + 1); }
  [[nodiscard]] std::size_t component_block() const { return mean_block() + tri(); }

  // gate j: dc weights then the bias
  [[nodiscard]] std::size_t gate(std::size_t j) const { return j * gate_block(); }
  // mean j: row t holds dc slopes then the intercept
  [[nodiscard]] std::size_t mean(std::size_t j) const { return k * gate_block() + j * component_block(); }
  // scale j: packed lower triangle by rows, diagonal entries hold rho
  [[nodiscard]] std::size_t scale(std::size_t j) const { return mean(j) + mean_block(); }
  [[nodiscard]] static std::size_t tri_index(std::size_t r, std::size_t c) { return r * (r + 1) / 2 + c; }
  [[nodiscard]] std::size_t size() const { return k * (gate_block() + component_block()); }
};

namespace detail {

struct Workspace {
  std::vector<double> logit, logpi, ell, mu, resid, r, u, diag;

  explicit Workspace(const MixtureLayout& lay)
      : logit(lay.k), logpi(lay.k), ell(lay.k), mu(lay.k * lay.dt), resid(lay.k * lay.dt),
        r(lay.k * lay.dt), u(lay.dt), diag(lay.k * lay.dt) {}
};

inline double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline void gate_log_weights(const MixtureLayout& lay, const double* p, const double* x, Workspace& ws) {
  for (std::size_t j = 0; j < lay.k; ++j) {
    const double* g = p + lay.gate(j);
    double a = g[lay.dc];
    for (std::size_t c = 0; c < lay.dc; ++c) a += g[c] * x[c];
    ws.logit[j] = a;
  }
  const double lse = log_sum_exp(ws.logit);
  for (std::size_t j = 0; j < lay.k; ++j) ws.logpi[j] = ws.logit[j] - lse;
}

inline void component_mean(const MixtureLayout& lay, const double* p, std::size_t j, const double* x, double* mu) {
  const double* m = p + lay.mean(j);
  for (std::size_t t = 0; t < lay.dt; ++t) {
    const double* row = m + t * (lay.dc + 1);
    double v = row[lay.dc];
    for (std::size_t c = 0; c < lay.dc; ++c) v += row[c] * x[c];
    mu[t] = v;
  }
}

/// log q(y | x) in standardized coordinates. When grad is non-null,
/// grad += scale * d log q / d params.
inline double log_density(const MixtureLayout& lay, const double* p, double floor, const double* y, const double* x,
                          Workspace& ws, double* grad = nullptr, double scale = 1.0) {
  const std::size_t k = lay.k, dt = lay.dt, dc = lay.dc;
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  gate_log_weights(lay, p, x, ws);
  for (std::size_t j = 0; j < k; ++j) {
    double* mu = &ws.mu[j * dt];
    double* e = &ws.resid[j * dt];
    double* r = &ws.r[j * dt];
    double* dg = &ws.diag[j * dt];
    component_mean(lay, p, j, x, mu);
    const double* L = p + lay.scale(j);
    double log_det = 0.0, quad = 0.0;
    for (std::size_t a = 0; a < dt; ++a) {
      e[a] = y[a] - mu[a];
      double acc = e[a];
      const double* row = L + MixtureLayout::tri_index(a, 0);
      for (std::size_t b = 0; b < a; ++b) acc -= row[b] * r[b];
      dg[a] = floor + std::exp(row[a]);
      r[a] = acc / dg[a];
      log_det += std::log(dg[a]);
      quad += r[a] * r[a];
    }
    ws.ell[j] = ws.logpi[j] - 0.5 * quad - log_det - static_cast<double>(dt) * half_log_2pi;
  }
  const double lq = log_sum_exp(ws.ell);
  if (grad == nullptr || !std::isfinite(lq)) return lq;

  for (std::size_t j = 0; j < k; ++j) {
    const double gamma = std::exp(ws.ell[j] - lq);
    const double pi = std::exp(ws.logpi[j]);
    // gate
    const double dg_a = scale * (gamma - pi);
    double* gg = grad + lay.gate(j);
    for (std::size_t c = 0; c < dc; ++c) gg[c] += dg_a * x[c];
    gg[dc] += dg_a;
    if (gamma == 0.0) continue;
    const double s = scale * gamma;
    const double* r = &ws.r[j * dt];
    const double* dg = &ws.diag[j * dt];
    const double* L = p + lay.scale(j);
    // u = L^{-T} r
    for (std::size_t a = dt; a-- > 0;) {
      double acc = r[a];
      for (std::size_t b = a + 1; b < dt; ++b) acc -= L[MixtureLayout::tri_index(b, a)] * ws.u[b];
      ws.u[a] = acc / dg[a];
    }
    double* gm = grad + lay.mean(j);
    for (std::size_t t = 0; t < dt; ++t) {
      double* row = gm + t * (dc + 1);
      const double g = s * ws.u[t];
      for (std::size_t c = 0; c < dc; ++c) row[c] += g * x[c];
      row[dc] += g;
    }
    double* gl = grad + lay.scale(j);
    for (std::size_t a = 0; a < dt; ++a) {
      double* row = gl + MixtureLayout::tri_index(a, 0);
      for (std::size_t b = 0; b < a; ++b) row[b] += s * ws.u[a] * r[b];
      row[a] += s * (ws.u[a] * r[a] - 1.0 / dg[a]) * (dg[a] - floor);
    }
  }
  return lq;
}

}  // namespace detail

struct FitConfig {
  std::size_t k = 8;
  std::size_t batch_size = 256;
  double learning_rate = 1e-3;
  std::size_t max_epochs = 300;
  std::size_t patience = 20;
  double sigma_floor = 1e-4;
  double validation_fraction = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
};

struct FitReport {
  double train_loss = 0.0;              // weighted mean NLL on the training split, standardized units
  double baseline_loss = 0.0;           // single linear-Gaussian least-squares fit on the same split
  std::vector<double> validation_trace;  // index 0 is the initial model
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
  bool early_stopped = false;
  bool baseline_fallback = false;
  std::uint64_t seed = 0;
};

class ConditionalMixture {
 public:
  ConditionalMixture() = default;
  ConditionalMixture(MixtureLayout layout, Standardizer target_std, Standardizer condition_std, double sigma_floor)
      : layout_(layout), target_std_(std::move(target_std)), condition_std_(std::move(condition_std)),
        sigma_floor_(sigma_floor), params_(layout.size(), 0.0) {
    if (target_std_.dim() != layout_.dt || condition_std_.dim() != layout_.dc) {
      throw std::invalid_argument("ConditionalMixture: standardizer dimension mismatch");
    }
  }

  [[nodiscard]] const MixtureLayout& layout() const { return layout_; }
  [[nodiscard]] std::size_t components() const { return layout_.k; }
  [[nodiscard]] std::size_t target_dim() const { return layout_.dt; }
  [[nodiscard]] std::size_t condition_dim() const { return layout_.dc; }
  [[nodiscard]] double sigma_floor() const { return sigma_floor_; }
  [[nodiscard]] const Standardizer& target_standardizer() const { return target_std_; }
  [[nodiscard]] const Standardizer& condition_standardizer() const { return condition_std_; }
  [[nodiscard]] std::span<const double> parameters() const { return params_; }
  [[nodiscard]] std::span<double> parameters() { return params_; }

  /// log q(target | condition) in original coordinates.
  [[nodiscard]] double log_density(std::span<const double> target, std::span<const double> condition) const {
    check_dims(target.size(), condition.size());
    std::vector<double> y(layout_.dt), x(layout_.dc);
    target_std_.apply(target, y);
    condition_std_.apply(condition, x);
    detail::Workspace ws(layout_);
    return detail::log_density(layout_, params_.data(), sigma_floor_, y.data(), x.data(), ws) - target_std_.log_jacobian();
  }

  /// Gate probabilities at a condition (original coordinates).
  [[nodiscard]] std::vector<double> gate_weights(std::span<const double> condition) const {
    check_dims(layout_.dt, condition.size());
    std::vector<double> x(layout_.dc);
    condition_std_.apply(condition, x);
    detail::Workspace ws(layout_);
    detail::gate_log_weights(layout_, params_.data(), x.data(), ws);
    std::vector<double> pi(layout_.k);
    for (std::size_t j = 0; j < layout_.k; ++j) pi[j] = std::exp(ws.logpi[j]);
    return pi;
  }

  /// Component j's mean at a condition, original coordinates.
  [[nodiscard]] std::vector<double> component_mean(std::size_t j, std::span<const double> condition) const {
    check_dims(layout_.dt, condition.size());
    std::vector<double> x(layout_.dc), mu(layout_.dt), out(layout_.dt);
    condition_std_.apply(condition, x);
    detail::component_mean(layout_, params_.data(), j, x.data(), mu.data());
    target_std_.invert(mu, out);
    return out;
  }

  /// d mean_j / d condition in original coordinates (dt x dc).
  [[nodiscard]] Eigen::MatrixXd component_slope(std::size_t j) const {
    Eigen::MatrixXd s(layout_.dt, layout_.dc);
    const double* m = params_.data() + layout_.mean(j);
    for (std::size_t t = 0; t < layout_.dt; ++t)
      for (std::size_t c = 0; c < layout_.dc; ++c)
        s(t, c) = m[t * (layout_.dc + 1) + c] * target_std_.sd[t] / condition_std_.sd[c];
    return s;
  }

  /// Lower Cholesky factor of component j, standardized coordinates.
  [[nodiscard]] Eigen::MatrixXd component_cholesky(std::size_t j) const {
    Eigen::MatrixXd L = Eigen::MatrixXd::Zero(layout_.dt, layout_.dt);
    const double* p = params_.data() + layout_.scale(j);
    for (std::size_t a = 0; a < layout_.dt; ++a)
      for (std::size_t b = 0; b <= a; ++b) {
        const double v = p[MixtureLayout::tri_index(a, b)];
        L(a, b) = a == b ? sigma_floor_ + std::exp(v) : v;
      }
    return L;
  }

  /// Covariance of component j in original coordinates.
  [[nodiscard]] Eigen::MatrixXd component_covariance(std::size_t j) const {
    Eigen::VectorXd sd = Eigen::Map<const Eigen::VectorXd>(target_std_.sd.data(), static_cast<Eigen::Index>(layout_.dt));
    Eigen::MatrixXd L = sd.asDiagonal() * component_cholesky(j);
    return L * L.transpose();
  }

  /// M i.i.d. draws (row-major M x dt) at a condition, original coordinates.
  [[nodiscard]] std::vector<double> sample(std::span<const double> condition, std::size_t m, Stream& rng) const {
    check_dims(layout_.dt, condition.size());
    const std::size_t dt = layout_.dt;
    std::vector<double> x(layout_.dc);
    condition_std_.apply(condition, x);
    detail::Workspace ws(layout_);
    detail::gate_log_weights(layout_, params_.data(), x.data(), ws);
    std::vector<double> cum(layout_.k);
    double acc = 0.0;
    for (std::size_t j = 0; j < layout_.k; ++j) cum[j] = acc += std::exp(ws.logpi[j]);
    std::vector<Eigen::MatrixXd> chol;
    std::vector<std::vector<double>> means;
    for (std::size_t j = 0; j < layout_.k; ++j) {
      chol.push_back(component_cholesky(j));
      std::vector<double> mu(dt);
      detail::component_mean(layout_, params_.data(), j, x.data(), mu.data());
      means.push_back(std::move(mu));
    }
    std::vector<double> out(m * dt), z(dt), y(dt);
    for (std::size_t i = 0; i < m; ++i) {
      const double u = rng.uniform() * acc;
      std::size_t j = 0;
      while (j + 1 < layout_.k && cum[j] < u) ++j;
      for (auto& zi : z) zi = rng.normal();
      for (std::size_t a = 0; a < dt; ++a) {
        double v = means[j][a];
        for (std::size_t b = 0; b <= a; ++b) v += chol[j](a, b) * z[b];
        y[a] = v;
      }
      target_std_.invert(y, std::span<double>(out).subspan(i * dt, dt));
    }
    return out;
  }

 private:
  void check_dims(std::size_t dt, std::size_t dc) const {
    if (dt != layout_.dt || dc != layout_.dc) throw std::invalid_argument("ConditionalMixture: dimension mismatch");
  }

  MixtureLayout layout_;
  Standardizer target_std_;
  Standardizer condition_std_;
  double sigma_floor_ = 1e-4;
  std::vector<double> params_;
};

/// Training data in standardized coordinates with weights rescaled to mean one.
struct StandardizedData {
  std::size_t dt = 0, dc = 0;
  std::vector<double> y, x, w;

  StandardizedData(const TrainingSet& set, const Standardizer& ts, const Standardizer& cs)
      : dt(set.target_dim), dc(set.condition_dim), y(set.targets.size()), x(set.conditions.size()), w(set.weights) {
    const std::size_t n = set.size();
    for (std::size_t i = 0; i < n; ++i) {
      ts.apply(std::span(set.targets).subspan(i * dt, dt), std::span(y).subspan(i * dt, dt));
      cs.apply(std::span(set.conditions).subspan(i * dc, dc), std::span(x).subspan(i * dc, dc));
    }
    const double mean_w = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(n);
    for (auto& wi : w) wi /= mean_w;
  }
};

/// Weighted mean negative log-likelihood over rows idx (standardized units);
/// if grad is non-null it receives the gradient (overwritten).
inline double mixture_loss(const MixtureLayout& lay, std::span<const double> params, double floor,
                           const StandardizedData& data, std::span<const std::size_t> idx, std::vector<double>* grad) {
  detail::Workspace ws(lay);
  if (grad) grad->assign(params.size(), 0.0);
  const double inv = 1.0 / static_cast<double>(idx.size());
  double loss = 0.0;
  for (std::size_t i : idx) {
    const double w = data.w[i];
    const double lq = detail::log_density(lay, params.data(), floor, &data.y[i * lay.dt], &data.x[i * lay.dc], ws,
                                          grad ? grad->data() : nullptr, -w * inv);
    loss -= w * lq;
  }
  return loss * inv;
}

namespace detail {

// Weighted least squares of y on [x, 1]; returns coefficient rows (dt x (dc+1))
// and residual covariance.
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> linear_gaussian_fit(const StandardizedData& d,
                                                                        std::span<const std::size_t> idx) {
  const auto dt = static_cast<Eigen::Index>(d.dt), dc = static_cast<Eigen::Index>(d.dc);
  Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(dc + 1, dc + 1);
  Eigen::MatrixXd xty = Eigen::MatrixXd::Zero(dc + 1, dt);
  Eigen::VectorXd xi(dc + 1);
  double wsum = 0.0;
  for (std::size_t i : idx) {
    for (Eigen::Index c = 0; c < dc; ++c) xi(c) = d.x[i * d.dc + static_cast<std::size_t>(c)];
    xi(dc) = 1.0;
    const double w = d.w[i];
    wsum += w;
    xtx.noalias() += w * xi * xi.transpose();
    for (Eigen::Index t = 0; t < dt; ++t) xty.col(t) += w * d.y[i * d.dt + static_cast<std::size_t>(t)] * xi;
  }
  xtx.diagonal().array() += 1e-10 * wsum;
  Eigen::MatrixXd beta = xtx.ldlt().solve(xty).transpose();  // dt x (dc+1)
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(dt, dt);
  Eigen::VectorXd e(dt);
  for (std::size_t i : idx) {
    for (Eigen::Index c = 0; c < dc; ++c) xi(c) = d.x[i * d.dc + static_cast<std::size_t>(c)];
    xi(dc) = 1.0;
    for (Eigen::Index t = 0; t < dt; ++t) e(t) = d.y[i * d.dt + static_cast<std::size_t>(t)];
    e -= beta * xi;
    cov.noalias() += d.w[i] * e * e.transpose();
  }
  cov /= wsum;
  return {beta, cov};
}

inline void set_component(const MixtureLayout& lay, std::vector<double>& p, std::size_t j, const Eigen::MatrixXd& beta,
                          const Eigen::VectorXd& shift, const Eigen::MatrixXd& chol, double floor) {
  double* m = p.data() + lay.mean(j);
  for (std::size_t t = 0; t < lay.dt; ++t)
    for (std::size_t c = 0; c <= lay.dc; ++c)
      m[t * (lay.dc + 1) + c] = beta(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(c)) +
                                (c == lay.dc ? shift(static_cast<Eigen::Index>(t)) : 0.0);
  double* L = p.data() + lay.scale(j);
  for (std::size_t a = 0; a < lay.dt; ++a)
    for (std::size_t b = 0; b <= a; ++b) {
      const double v = chol(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
      L[MixtureLayout::tri_index(a, b)] = a == b ? std::log(std::max(v - floor, 1e-3)) : v;
    }
}

inline Eigen::MatrixXd safe_cholesky(Eigen::MatrixXd cov, double floor) {
  const auto d = cov.rows();
  cov.diagonal().array() += 4.0 * floor * floor + 1e-12 * std::max(1.0, cov.trace() / static_cast<double>(d));
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) return Eigen::MatrixXd::Identity(d, d);
  return llt.matrixL();
}

// k-means++ seeding; returns k centers (rows) of the given points.
inline Eigen::MatrixXd kmeans_pp(const Eigen::MatrixXd& pts, std::size_t k, Stream& rng) {
  const auto n = pts.rows();
  Eigen::MatrixXd centers(static_cast<Eigen::Index>(k), pts.cols());
  centers.row(0) = pts.row(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n))));
  Eigen::VectorXd d2 = (pts.rowwise() - centers.row(0)).rowwise().squaredNorm();
  for (std::size_t c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (pick = 0; pick + 1 < n; ++pick) {
        u -= d2(pick);
        if (u <= 0.0) break;
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
    }
    centers.row(static_cast<Eigen::Index>(c)) = pts.row(pick);
    d2 = d2.cwiseMin((pts.rowwise() - centers.row(static_cast<Eigen::Index>(c))).rowwise().squaredNorm());
  }
  return centers;
}

}  // namespace detail

/// Fits a k-component mixture of experts by minimizing the weighted mean
/// negative log-likelihood with Adam, a 10% validation split and early stopping.
inline std::pair<ConditionalMixture, FitReport> fit(const TrainingSet& train, const FitConfig& cfg, Stream rng) {
  train.validate();
  const std::size_t n = train.size();
  if (cfg.k == 0) throw std::invalid_argument("fit: component count must be positive");
  if (n < 10 * cfg.k) {
    throw std::invalid_argument("fit: need at least 10 training pairs per component (N=" + std::to_string(n) +
                                ", k=" + std::to_string(cfg.k) + ")");
  }
  FitReport report;
  report.seed = rng.key();

  MixtureLayout lay{cfg.k, train.target_dim, train.condition_dim};
  ConditionalMixture model(lay, train.target_stats(), train.condition_stats(), cfg.sigma_floor);
  const StandardizedData data(train, model.target_standardizer(), model.condition_standardizer());

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Stream shuffle_rng = rng.split("split");
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
  const std::size_t n_val = std::max<std::size_t>(1, static_cast<std::size_t>(cfg.validation_fraction * static_cast<double>(n)));
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> tr(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());

  // Initialization: shared least-squares mean map, intercepts offset by
  // k-means++ centres of the residuals, pooled within-cluster covariance.
  const auto [beta, resid_cov] = detail::linear_gaussian_fit(data, tr);
  const auto dt = static_cast<Eigen::Index>(lay.dt);
  Eigen::MatrixXd resid(static_cast<Eigen::Index>(tr.size()), dt);
  {
    Eigen::VectorXd xi(static_cast<Eigen::Index>(lay.dc + 1));
    for (std::size_t r = 0; r < tr.size(); ++r) {
      const std::size_t i = tr[r];
      for (std::size_t c = 0; c < lay.dc; ++c) xi(static_cast<Eigen::Index>(c)) = data.x[i * lay.dc + c];
      xi(static_cast<Eigen::Index>(lay.dc)) = 1.0;
      Eigen::VectorXd fitted = beta * xi;
      for (Eigen::Index t = 0; t < dt; ++t) resid(static_cast<Eigen::Index>(r), t) = data.y[i * lay.dt + static_cast<std::size_t>(t)] - fitted(t);
    }
  }
  Stream init_rng = rng.split("init");
  const Eigen::MatrixXd centers = detail::kmeans_pp(resid, cfg.k, init_rng);
  Eigen::MatrixXd within = Eigen::MatrixXd::Zero(dt, dt);
  for (Eigen::Index r = 0; r < resid.rows(); ++r) {
    Eigen::Index best = 0;
    (centers.rowwise() - resid.row(r)).rowwise().squaredNorm().minCoeff(&best);
    Eigen::VectorXd e = (resid.row(r) - centers.row(best)).transpose();
    within.noalias() += e * e.transpose();
  }
  within /= static_cast<double>(resid.rows());
  const Eigen::MatrixXd within_chol = detail::safe_cholesky(within, cfg.sigma_floor);
  std::vector<double> params(lay.size(), 0.0);
  for (std::size_t j = 0; j < cfg.k; ++j) {
    detail::set_component(lay, params, j, beta, centers.row(static_cast<Eigen::Index>(j)).transpose(), within_chol, cfg.sigma_floor);
  }

  std::vector<double> baseline(lay.size(), 0.0);
  {
    const Eigen::MatrixXd chol = detail::safe_cholesky(resid_cov, cfg.sigma_floor);
    for (std::size_t j = 0; j < cfg.k; ++j) detail::set_component(lay, baseline, j, beta, Eigen::VectorXd::Zero(dt), chol, cfg.sigma_floor);
  }
  report.baseline_loss = mixture_loss(lay, baseline, cfg.sigma_floor, data, tr, nullptr);

  auto check_finite = [&](double loss, const char* where, std::size_t epoch) {
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "fit: non-finite " << where << " loss at epoch " << epoch << " (N=" << n << ", k=" << cfg.k
          << ", target_dim=" << lay.dt << ", condition_dim=" << lay.dc << ", lr=" << cfg.learning_rate << ")";
      throw std::runtime_error(msg.str());
    }
  };

  double best_val = mixture_loss(lay, params, cfg.sigma_floor, data, val, nullptr);
  check_finite(best_val, "validation", 0);
  report.validation_trace.push_back(best_val);
  std::vector<double> best_params = params;

  std::vector<double> grad, m1(lay.size(), 0.0), m2(lay.size(), 0.0);
  double b1t = 1.0, b2t = 1.0;
  std::size_t since_best = 0;
  Stream batch_rng = rng.split("batches");
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    for (std::size_t i = tr.size(); i > 1; --i) std::swap(tr[i - 1], tr[batch_rng.below(i)]);
    for (std::size_t start = 0; start < tr.size(); start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, tr.size() - start);
      const double loss = mixture_loss(lay, params, cfg.sigma_floor, data, std::span(tr).subspan(start, len), &grad);
      check_finite(loss, "training", epoch);
      b1t *= cfg.beta1;
      b2t *= cfg.beta2;
      const double step = cfg.learning_rate * std::sqrt(1.0 - b2t) / (1.0 - b1t);
      for (std::size_t q = 0; q < params.size(); ++q) {
        m1[q] = cfg.beta1 * m1[q] + (1.0 - cfg.beta1) * grad[q];
        m2[q] = cfg.beta2 * m2[q] + (1.0 - cfg.beta2) * grad[q] * grad[q];
        params[q] -= step * m1[q] / (std::sqrt(m2[q]) + cfg.adam_epsilon);
      }
    }
    const double v = mixture_loss(lay, params, cfg.sigma_floor, data, val, nullptr);
    check_finite(v, "validation", epoch);
    report.validation_trace.push_back(v);
    report.epochs = epoch;
    if (v < best_val) {
      best_val = v;
      best_params = params;
      report.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      report.early_stopped = true;
      break;
    }
  }

  report.train_loss = mixture_loss(lay, best_params, cfg.sigma_floor, data, tr, nullptr);
  if (report.train_loss > report.baseline_loss) {
    best_params = baseline;
    report.train_loss = report.baseline_loss;
    report.baseline_fallback = true;
  }
  std::copy(best_params.begin(), best_params.end(), model.parameters().begin());
  return {std::move(model), report};
}

}  // namespace sbi
