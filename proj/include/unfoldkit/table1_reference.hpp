#pragma once

// Published reference statistics for the multidimensional Gaussian toy: mean (x 10^-2) and
// standard deviation (x 10^-3) of the unfolded weighted mean over a 100-replicate ensemble,
// by number of detector-level features N (rows) and iteration count 1, 2, 4, 8 (columns).
// Each value is paired with its quoted uncertainty in the last digit(s).

#include <array>
#include <cstddef>

namespace unfoldkit::reference {

struct Value {
  double value;
  double error;
};

inline constexpr std::array<std::size_t, 4> kIterations{1, 2, 4, 8};

// clang-format off
inline constexpr std::array<std::array<Value, 4>, 5> kMeanE2{{
    {{{21.62, 0.08}, {25.13, 0.08}, {28.12, 0.08}, {29.67, 0.08}}},
    {{{28.54, 0.05}, {29.24, 0.06}, {29.88, 0.06}, {30.06, 0.05}}},
    {{{29.54, 0.04}, {29.91, 0.04}, {30.02, 0.04}, {30.00, 0.04}}},
    {{{29.89, 0.03}, {30.01, 0.03}, {30.01, 0.03}, {30.01, 0.03}}},
    {{{30.04, 0.03}, {30.00, 0.03}, {29.99, 0.04}, {30.06, 0.03}}},
}};

inline constexpr std::array<std::array<Value, 4>, 5> kStdE3{{
    {{{8.4, 0.5}, {8.3, 0.6}, {8.0, 0.7}, {7.9, 0.7}}},
    {{{5.3, 0.4}, {5.6, 0.4}, {5.2, 0.4}, {4.8, 0.4}}},
    {{{3.6, 0.3}, {4.4, 0.4}, {3.6, 0.3}, {4.0, 0.3}}},
    {{{3.2, 0.2}, {2.8, 0.2}, {3.1, 0.2}, {3.1, 0.2}}},
    {{{3.5, 0.3}, {3.1, 0.2}, {3.8, 0.3}, {3.1, 0.2}}},
}};
// clang-format on

/// Reference mean and std (in natural units) for feature count n (1-based) at `iterations`,
/// or false when the cell is not tabulated.
inline bool lookup(std::size_t n, std::size_t iterations, Value& mean, Value& std_dev) {
  if (n < 1 || n > kMeanE2.size()) return false;
  for (std::size_t c = 0; c < kIterations.size(); ++c) {
    if (kIterations[c] != iterations) continue;
    mean = {kMeanE2[n - 1][c].value * 1e-2, kMeanE2[n - 1][c].error * 1e-2};
    std_dev = {kStdE3[n - 1][c].value * 1e-3, kStdE3[n - 1][c].error * 1e-3};
    return true;
  }
  return false;
}

}  // namespace unfoldkit::reference
