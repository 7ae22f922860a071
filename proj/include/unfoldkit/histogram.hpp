#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "unfoldkit/errors.hpp"

namespace unfoldkit {

/// Weighted 1-D histogram with sum-of-squared-weights tracking and under/overflow.
class Histogram1D {
 public:
  Histogram1D() = default;

  explicit Histogram1D(std::vector<double> edges) : edges_(std::move(edges)) {
    if (edges_.size() < 2) throw ConfigError("a histogram needs at least two bin edges");
    for (std::size_t i = 0; i + 1 < edges_.size(); ++i)
      if (!(edges_[i] < edges_[i + 1]) || !std::isfinite(edges_[i]) || !std::isfinite(edges_[i + 1]))
        throw ConfigError("histogram edges must be finite and strictly increasing");
    contents_.assign(n_bins(), 0.0);
    sumw2_.assign(n_bins(), 0.0);
  }

  static Histogram1D uniform(std::size_t n, double lo, double hi) { return Histogram1D(uniform_edges(n, lo, hi)); }

  static std::vector<double> uniform_edges(std::size_t n, double lo, double hi) {
    if (n == 0 || !(lo < hi)) throw ConfigError("uniform binning needs n > 0 and lo < hi");
    std::vector<double> e(n + 1);
    for (std::size_t i = 0; i <= n; ++i) e[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n);
    e.back() = hi;
    return e;
  }

  std::size_t n_bins() const noexcept { return edges_.empty() ? 0 : edges_.size() - 1; }
  const std::vector<double>& edges() const noexcept { return edges_; }
  const std::vector<double>& contents() const noexcept { return contents_; }
  std::vector<double>& contents() noexcept { return contents_; }
  const std::vector<double>& sumw2() const noexcept { return sumw2_; }
  std::vector<double>& sumw2() noexcept { return sumw2_; }
  double underflow() const noexcept { return underflow_; }
  double overflow() const noexcept { return overflow_; }

  double lo(std::size_t i) const { return edges_.at(i); }
  double hi(std::size_t i) const { return edges_.at(i + 1); }
  double center(std::size_t i) const { return 0.5 * (lo(i) + hi(i)); }

  /// Bin holding x (bins are [lo, hi), the last one closed), or nullopt outside the range.
  std::optional<std::size_t> find_bin(double x) const {
    if (!(x >= edges_.front()) || x > edges_.back()) return std::nullopt;
    if (x == edges_.back()) return n_bins() - 1;
    const auto it = std::upper_bound(edges_.begin(), edges_.end(), x);
    return static_cast<std::size_t>(it - edges_.begin()) - 1;
  }

  void fill(double x, double w = 1.0) {
    if (auto b = find_bin(x)) {
      contents_[*b] += w;
      sumw2_[*b] += w * w;
    } else if (x < edges_.front()) {
      underflow_ += w;
    } else {
      overflow_ += w;
    }
  }

  /// Sum over in-range bins.
  double total() const noexcept {
    double s = 0.0;
    for (double c : contents_) s += c;
    return s;
  }

  void scale(double f) {
    for (double& c : contents_) c *= f;
    for (double& v : sumw2_) v *= f * f;
    underflow_ *= f;
    overflow_ *= f;
  }

  bool same_binning(const Histogram1D& other) const { return edges_ == other.edges_; }

 private:
  std::vector<double> edges_;
  std::vector<double> contents_;
  std::vector<double> sumw2_;
  double underflow_ = 0.0;
  double overflow_ = 0.0;
};

}  // namespace unfoldkit
