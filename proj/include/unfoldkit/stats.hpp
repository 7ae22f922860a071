#pragma once

// Weighted summary statistics used for reporting.

#include <cmath>
#include <span>
#include <vector>

#include "unfoldkit/errors.hpp"
#include "unfoldkit/histogram.hpp"

namespace unfoldkit {

inline double weighted_mean(std::span<const double> values, std::span<const double> weights) {
  if (values.size() != weights.size()) throw UnfoldError("weighted_mean: length mismatch");
  double sw = 0.0, swx = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    sw += weights[i];
    swx += weights[i] * values[i];
  }
  if (sw == 0.0) throw UnfoldError("weighted_mean: zero total weight");
  return swx / sw;
}

inline Histogram1D weighted_hist(std::span<const double> values, std::span<const double> weights,
                                 std::vector<double> edges) {
  if (values.size() != weights.size()) throw UnfoldError("weighted_hist: length mismatch");
  Histogram1D h(std::move(edges));
  for (std::size_t i = 0; i < values.size(); ++i) h.fill(values[i], weights[i]);
  return h;
}

/// (sum w)^2 / sum w^2.
inline double effective_sample_size(std::span<const double> weights) {
  double s = 0.0, s2 = 0.0;
  for (double w : weights) {
    s += w;
    s2 += w * w;
  }
  return s2 > 0.0 ? s * s / s2 : 0.0;
}

enum class Normalization { absolute, shape };

/// Mean over bins of (a - b)^2 / (var_a + var_b), with per-bin variances taken from the
/// sums of squared weights (the Poisson variance of the effective counts). Bins where both
/// variances vanish are skipped. In shape mode both histograms are first scaled to unit area.
inline double chi2_per_bin(const Histogram1D& a, const Histogram1D& b, Normalization norm = Normalization::absolute) {
  if (!a.same_binning(b)) throw UnfoldError("chi2_per_bin: histograms have different binning");
  double fa = 1.0, fb = 1.0;
  if (norm == Normalization::shape) {
    const double ta = a.total(), tb = b.total();
    if (ta == 0.0 || tb == 0.0) throw UnfoldError("chi2_per_bin: zero total weight");
    fa = 1.0 / ta;
    fb = 1.0 / tb;
  }
  double chi2 = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < a.n_bins(); ++i) {
    const double var = a.sumw2()[i] * fa * fa + b.sumw2()[i] * fb * fb;
    if (var <= 0.0) continue;
    const double d = a.contents()[i] * fa - b.contents()[i] * fb;
    chi2 += d * d / var;
    ++used;
  }
  if (used == 0) throw UnfoldError("chi2_per_bin: no bin has a non-zero variance");
  return chi2 / static_cast<double>(used);
}

/// sum |a - b| / sum |a|.
inline double relative_l1(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw UnfoldError("relative_l1: length mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += std::abs(a[i] - b[i]);
    den += std::abs(a[i]);
  }
  if (den == 0.0) throw UnfoldError("relative_l1: reference has zero norm");
  return num / den;
}

/// L1 distance between unit-area versions of two histograms.
inline double shape_l1(const Histogram1D& a, const Histogram1D& b) {
  if (!a.same_binning(b)) throw UnfoldError("shape_l1: histograms have different binning");
  const double ta = a.total(), tb = b.total();
  if (ta == 0.0 || tb == 0.0) throw UnfoldError("shape_l1: zero total weight");
  double s = 0.0;
  for (std::size_t i = 0; i < a.n_bins(); ++i) s += std::abs(a.contents()[i] / ta - b.contents()[i] / tb);
  return s;
}

}  // namespace unfoldkit
