#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

namespace sbi {

/// Static k-d tree over row-major points for k-nearest-neighbour distances.
class KdTree {
 public:
  KdTree(std::span<const double> points, std::size_t dim) : pts_(points), dim_(dim), idx_(points.size() / dim) {
    std::iota(idx_.begin(), idx_.end(), std::size_t{0});
    axes_.assign(idx_.size(), 0);
    if (!idx_.empty()) build(0, idx_.size());
  }

  [[nodiscard]] std::size_t size() const { return idx_.size(); }

  /// Euclidean distance to the k-th nearest point, skipping point `exclude`
  /// (pass size() to skip nothing).
  [[nodiscard]] double kth_distance(std::span<const double> q, std::size_t k, std::size_t exclude) const {
    std::vector<double> best(k, std::numeric_limits<double>::infinity());  // ascending squared distances
    search(0, idx_.size(), q, exclude, best);
    return std::sqrt(best.back());
  }

 private:
  double coord(std::size_t point, std::size_t axis) const { return pts_[point * dim_ + axis]; }

  void build(std::size_t lo, std::size_t hi) {
    if (hi - lo <= kLeaf) return;
    // split on the widest axis at the median
    std::size_t axis = 0;
    double widest = -1.0;
    for (std::size_t a = 0; a < dim_; ++a) {
      double mn = std::numeric_limits<double>::infinity(), mx = -mn;
      for (std::size_t i = lo; i < hi; ++i) {
        mn = std::min(mn, coord(idx_[i], a));
        mx = std::max(mx, coord(idx_[i], a));
      }
      if (mx - mn > widest) {
        widest = mx - mn;
        axis = a;
      }
    }
    const std::size_t mid = lo + (hi - lo) / 2;
    std::nth_element(idx_.begin() + static_cast<std::ptrdiff_t>(lo), idx_.begin() + static_cast<std::ptrdiff_t>(mid),
                     idx_.begin() + static_cast<std::ptrdiff_t>(hi),
                     [&](std::size_t a, std::size_t b) { return coord(a, axis) < coord(b, axis); });
    axes_[mid] = axis;
    build(lo, mid);
    build(mid + 1, hi);
  }

  void offer(double d2, std::vector<double>& best) const {
    if (d2 >= best.back()) return;
    auto it = std::upper_bound(best.begin(), best.end(), d2);
    best.insert(it, d2);
    best.pop_back();
  }

  void search(std::size_t lo, std::size_t hi, std::span<const double> q, std::size_t exclude, std::vector<double>& best) const {
    if (hi - lo <= kLeaf) {
      for (std::size_t i = lo; i < hi; ++i) {
        const std::size_t p = idx_[i];
        if (p == exclude) continue;
        offer(dist2(p, q), best);
      }
      return;
    }
    const std::size_t mid = lo + (hi - lo) / 2;
    const std::size_t p = idx_[mid];
    const std::size_t axis = axes_[mid];
    if (p != exclude) offer(dist2(p, q), best);
    const double diff = q[axis] - coord(p, axis);
    if (diff < 0.0) {
      search(lo, mid, q, exclude, best);
      if (diff * diff < best.back()) search(mid + 1, hi, q, exclude, best);
    } else {
      search(mid + 1, hi, q, exclude, best);
      if (diff * diff < best.back()) search(lo, mid, q, exclude, best);
    }
  }

  double dist2(std::size_t p, std::span<const double> q) const {
    double s = 0.0;
    for (std::size_t a = 0; a < dim_; ++a) {
      const double d = pts_[p * dim_ + a] - q[a];
      s += d * d;
    }
    return s;
  }

  static constexpr std::size_t kLeaf = 8;
  std::span<const double> pts_;
  std::size_t dim_;
  std::vector<std::size_t> idx_;
  std::vector<std::size_t> axes_;
};

}  // namespace sbi
