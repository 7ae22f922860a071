#pragma once

// Independent reference computations used by the tests. Nothing here calls into the library's
// numerical code paths; only plain data (parameters, samples) is read from library objects.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

namespace oracle {

inline double normal_pdf(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return std::exp(-0.5 * z * z) / (sd * std::sqrt(2.0 * std::numbers::pi));
}

inline double normal_cdf(double x, double mean, double sd) { return 0.5 * std::erfc(-(x - mean) / (sd * std::sqrt(2.0))); }

/// Composite Simpson rule with n (even) panels.
inline double simpson(const std::function<double(double)>& f, double a, double b, int n = 200) {
  const double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

/// P(sim in [c, d] | gen in [a, b]) for gen ~ N(prior_mean, prior_sd) restricted to the bin and
/// sim = gen + N(0, smear).
inline double smeared_bin_probability(double a, double b, double c, double d, double prior_mean, double prior_sd,
                                      double smear) {
  const double num = simpson(
      [&](double g) { return normal_pdf(g, prior_mean, prior_sd) * (normal_cdf(d, g, smear) - normal_cdf(c, g, smear)); }, a,
      b);
  const double den = simpson([&](double g) { return normal_pdf(g, prior_mean, prior_sd); }, a, b);
  return num / den;
}

/// Closed-form solution of the 2x2 system R x = d.
inline std::vector<double> solve2x2(double r00, double r01, double r10, double r11, double d0, double d1) {
  const double det = r00 * r11 - r01 * r10;
  return {(r11 * d0 - r01 * d1) / det, (r00 * d1 - r10 * d0) / det};
}

/// Sum_j d_j ln(mu_j) - mu_j for a dense column-major response (rows = sim bins).
inline double poisson_loglik(const std::vector<std::vector<double>>& response, const std::vector<double>& gen,
                             const std::vector<double>& data) {
  double ll = 0.0;
  for (std::size_t j = 0; j < data.size(); ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < gen.size(); ++i) mu += response[j][i] * gen[i];
    ll += (data[j] > 0.0 ? data[j] * std::log(mu) : 0.0) - mu;
  }
  return ll;
}

/// Weighted binned mean of y given x, over the given edges. Empty bins give NaN.
inline std::vector<double> binned_conditional_mean(const std::vector<double>& x, const std::vector<double>& y,
                                                   const std::vector<double>& edges) {
  std::vector<double> sum(edges.size() - 1, 0.0), count(edges.size() - 1, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t b = 0; b + 1 < edges.size(); ++b)
      if (x[i] >= edges[b] && x[i] < edges[b + 1]) {
        sum[b] += y[i];
        count[b] += 1.0;
        break;
      }
  std::vector<double> out(sum.size());
  for (std::size_t b = 0; b < sum.size(); ++b) out[b] = count[b] > 0 ? sum[b] / count[b] : std::nan("");
  return out;
}

/// Plain mean and sample standard deviation.
struct Moments {
  double mean = 0.0;
  double sd = 0.0;
};

inline Moments moments(const std::vector<double>& v) {
  Moments m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  for (double x : v) m.sd += (x - m.mean) * (x - m.mean);
  m.sd = std::sqrt(m.sd / static_cast<double>(v.size() - 1));
  return m;
}

/// Empirical quantile by sorting (linear interpolation).
inline double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("unfoldkit_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace oracle
