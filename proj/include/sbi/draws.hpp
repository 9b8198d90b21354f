#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace sbi {

/// Weighted posterior draws with provenance.
struct DrawSet {
  std::vector<std::string> names;
  std::vector<double> draws;    // row-major, size() x dim()
  std::vector<double> weights;  // sums to one
  std::string method;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::uint64_t simulation_budget = 0;
  double leaked_fraction = 0.0;  // share of proposals discarded for leaving the prior support

  DrawSet() = default;
  DrawSet(std::vector<std::string> names_, std::vector<double> draws_, std::string method_)
      : names(std::move(names_)), draws(std::move(draws_)), method(std::move(method_)) {
    if (names.empty() || draws.size() % names.size() != 0) throw std::invalid_argument("DrawSet: ragged draws");
    weights.assign(draws.size() / names.size(), size() ? 1.0 / static_cast<double>(size()) : 0.0);
  }

  [[nodiscard]] std::size_t dim() const { return names.size(); }
  [[nodiscard]] std::size_t size() const { return names.empty() ? 0 : draws.size() / names.size(); }
  [[nodiscard]] std::span<const double> row(std::size_t i) const { return std::span(draws).subspan(i * dim(), dim()); }

  [[nodiscard]] std::vector<double> column(std::size_t c) const {
    std::vector<double> out(size());
    for (std::size_t i = 0; i < size(); ++i) out[i] = draws[i * dim() + c];
    return out;
  }

  [[nodiscard]] bool uniform_weights() const {
    for (double w : weights)
      if (w != weights.front()) return false;
    return true;
  }

  void normalize_weights() {
    double s = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("DrawSet: negative or non-finite weight");
      s += w;
    }
    if (!(s > 0.0)) throw std::invalid_argument("DrawSet: weights sum to zero");
    for (auto& w : weights) w /= s;
  }

  void validate() const {
    if (dim() == 0 || draws.size() != size() * dim() || weights.size() != size()) {
      throw std::invalid_argument("DrawSet: inconsistent shape");
    }
    double s = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw std::invalid_argument("DrawSet: negative weight");
      s += w;
    }
    if (size() > 0 && std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("DrawSet: weights do not sum to one");
  }

  [[nodiscard]] Eigen::VectorXd mean() const {
    Eigen::VectorXd m = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim()));
    for (std::size_t i = 0; i < size(); ++i)
      for (std::size_t c = 0; c < dim(); ++c) m(static_cast<Eigen::Index>(c)) += weights[i] * draws[i * dim() + c];
    return m;
  }

  [[nodiscard]] Eigen::MatrixXd covariance() const {
    const auto d = static_cast<Eigen::Index>(dim());
    const Eigen::VectorXd m = mean();
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
    Eigen::VectorXd e(d);
    double w2 = 0.0;
    for (std::size_t i = 0; i < size(); ++i) {
      for (Eigen::Index c = 0; c < d; ++c) e(c) = draws[i * dim() + static_cast<std::size_t>(c)] - m(c);
      cov.noalias() += weights[i] * e * e.transpose();
      w2 += weights[i] * weights[i];
    }
    return w2 < 1.0 ? Eigen::MatrixXd(cov / (1.0 - w2)) : cov;
  }

  /// Kish effective sample size.
  [[nodiscard]] double ess() const {
    double s = 0.0, s2 = 0.0;
    for (double w : weights) {
      s += w;
      s2 += w * w;
    }
    return s2 > 0.0 ? s * s / s2 : 0.0;
  }
};

}  // namespace sbi
