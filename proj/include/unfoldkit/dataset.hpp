#pragma once

// Event containers and the Gaussian toy generators.
//
// Gaussian parameters are (mean, width) with the width always a standard deviation.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "unfoldkit/errors.hpp"
#include "unfoldkit/rng.hpp"

namespace unfoldkit {

using FeatureVector = std::vector<double>;

/// Features stored column-wise: one column per event.
using FeatureMatrix = Eigen::MatrixXd;

/// One synthetic signal record. A missing side is an absent optional, never a sentinel value.
struct PairedEvent {
  std::optional<FeatureVector> gen;
  std::optional<FeatureVector> sim;
  double weight = 1.0;
};

/// Weighted collection of feature vectors. Weights may be negative.
struct EventSet {
  std::vector<FeatureVector> events;
  std::vector<double> weights;

  std::size_t size() const noexcept { return events.size(); }
  bool empty() const noexcept { return events.empty(); }
  std::size_t dimension() const noexcept { return events.empty() ? 0 : events.front().size(); }

  void push_back(FeatureVector x, double w = 1.0) {
    events.push_back(std::move(x));
    weights.push_back(w);
  }

  double total_weight() const noexcept {
    double s = 0.0;
    for (double w : weights) s += w;
    return s;
  }

  /// Throws UnfoldError on length mismatch, ragged dimensions or non-finite entries.
  void validate(const std::string& what) const {
    if (events.size() != weights.size()) throw UnfoldError(what + ": events/weights length mismatch");
    const std::size_t d = dimension();
    for (std::size_t i = 0; i < events.size(); ++i) {
      if (events[i].size() != d) throw UnfoldError(what + ": ragged feature dimension at event " + std::to_string(i));
      for (double v : events[i])
        if (!std::isfinite(v)) throw UnfoldError(what + ": non-finite feature at event " + std::to_string(i));
      if (!std::isfinite(weights[i])) throw UnfoldError(what + ": non-finite weight at event " + std::to_string(i));
    }
  }
};

inline FeatureMatrix to_matrix(std::span<const FeatureVector> events, std::size_t dim) {
  FeatureMatrix m(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(events.size()));
  for (std::size_t j = 0; j < events.size(); ++j)
    for (std::size_t i = 0; i < dim; ++i) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = events[j][i];
  return m;
}

inline FeatureMatrix to_matrix(const EventSet& set) { return to_matrix(set.events, set.dimension()); }

struct ToyConfig {
  double truth_mean = 0.2;
  double truth_width = 0.8;
  double prior_mean = 0.0;
  double prior_width = 1.0;
  /// Width of each independent smearing draw Z_i.
  double smear_width = 0.5;
  /// Number of smearing draws summed into the detector-level value.
  std::size_t n_aux_smearings = 1;
  double noise_mean = 0.0;
  double noise_width = 1.2;
  double noise_fraction = 0.1;
  double acceptance_loss = 0.1;
  double efficiency_loss = 0.1;
  std::size_t n_events = 100000;
  std::uint64_t seed = 1;
  /// Keep the per-pair smearing draws of the synthetic sample (debug aid).
  bool record_smearing = false;

  void validate() const {
    auto finite_positive = [](double v, const char* name) {
      if (!std::isfinite(v) || v <= 0.0) throw ConfigError(std::string(name) + " must be finite and > 0");
    };
    auto finite = [](double v, const char* name) {
      if (!std::isfinite(v)) throw ConfigError(std::string(name) + " must be finite");
    };
    auto fraction = [](double v, const char* name) {
      if (!std::isfinite(v) || v < 0.0 || v >= 1.0) throw ConfigError(std::string(name) + " must lie in [0, 1)");
    };
    finite(truth_mean, "truth_mean");
    finite(prior_mean, "prior_mean");
    finite(noise_mean, "noise_mean");
    finite_positive(truth_width, "truth_width");
    finite_positive(prior_width, "prior_width");
    finite_positive(smear_width, "smear_width");
    finite_positive(noise_width, "noise_width");
    fraction(noise_fraction, "noise_fraction");
    fraction(acceptance_loss, "acceptance_loss");
    fraction(efficiency_loss, "efficiency_loss");
    if (n_events == 0) throw ConfigError("n_events must be positive");
  }
};

/// Everything a toy generator produces. Only data, noise_mc and synthetic are visible to an
/// unfolding; the holdouts exist for validation.
struct ToySample {
  EventSet data;
  /// Parallel to data: true for background-origin events.
  std::vector<bool> data_is_background;
  EventSet noise_mc;
  std::vector<PairedEvent> synthetic;
  /// Generator-level truth of every signal event that has a truth value.
  EventSet truth_holdout;
  /// Detector-level signal part of data (data without the background events).
  EventSet signal_holdout;
  /// Per synthetic pair, the individual smearing draws (only with record_smearing).
  std::vector<std::vector<double>> synthetic_smearing;
};

namespace detail {

enum Stream : std::uint64_t { kDataStream = 1, kNoiseStream = 2, kSyntheticStream = 3 };

struct SmearedPair {
  double truth;
  double observed;
  std::vector<double> draws;
};

inline SmearedPair smear(Rng& rng, double truth, const ToyConfig& cfg) {
  SmearedPair p{truth, truth, {}};
  p.draws.reserve(cfg.n_aux_smearings);
  for (std::size_t i = 0; i < cfg.n_aux_smearings; ++i) {
    const double z = rng.normal(0.0, cfg.smear_width);
    p.draws.push_back(z);
    p.observed += z;
  }
  return p;
}

struct Presence {
  bool gen;
  bool sim;
};

// Independent acceptance and efficiency losses; a pair losing both sides is redrawn.
inline Presence draw_presence(Rng& rng, const ToyConfig& cfg) {
  for (;;) {
    const bool gen_lost = rng.bernoulli(cfg.acceptance_loss);
    const bool sim_lost = rng.bernoulli(cfg.efficiency_loss);
    if (!(gen_lost && sim_lost)) return {!gen_lost, !sim_lost};
  }
}

}  // namespace detail

/// One-dimensional toy with background, acceptance and efficiency effects.
///
/// Data holds n_events detector-level entries; each is background with probability
/// noise_fraction, otherwise the detected side of a signal pair drawn from the truth law.
/// noise_mc holds round(noise_fraction * n_events) unit-weight background events.
/// synthetic holds n_events pairs drawn from the prior law.
inline ToySample generate_gaussian_1d(const ToyConfig& cfg) {
  cfg.validate();
  ToySample out;

  Rng data_rng(derive_seed(cfg.seed, {detail::kDataStream}));
  out.data.events.reserve(cfg.n_events);
  out.data.weights.reserve(cfg.n_events);
  for (std::size_t i = 0; i < cfg.n_events; ++i) {
    if (data_rng.bernoulli(cfg.noise_fraction)) {
      out.data.push_back({data_rng.normal(cfg.noise_mean, cfg.noise_width)});
      out.data_is_background.push_back(true);
      continue;
    }
    // Draw signal pairs until one is detected; undetected truths still enter the holdout.
    for (;;) {
      const auto pair = detail::smear(data_rng, data_rng.normal(cfg.truth_mean, cfg.truth_width), cfg);
      const auto presence = detail::draw_presence(data_rng, cfg);
      if (presence.gen) out.truth_holdout.push_back({pair.truth});
      if (presence.sim) {
        out.data.push_back({pair.observed});
        out.signal_holdout.push_back({pair.observed});
        out.data_is_background.push_back(false);
        break;
      }
    }
  }

  Rng noise_rng(derive_seed(cfg.seed, {detail::kNoiseStream}));
  const auto n_noise = static_cast<std::size_t>(std::llround(cfg.noise_fraction * static_cast<double>(cfg.n_events)));
  for (std::size_t i = 0; i < n_noise; ++i) out.noise_mc.push_back({noise_rng.normal(cfg.noise_mean, cfg.noise_width)});

  Rng synth_rng(derive_seed(cfg.seed, {detail::kSyntheticStream}));
  out.synthetic.reserve(cfg.n_events);
  for (std::size_t i = 0; i < cfg.n_events; ++i) {
    auto pair = detail::smear(synth_rng, synth_rng.normal(cfg.prior_mean, cfg.prior_width), cfg);
    const auto presence = detail::draw_presence(synth_rng, cfg);
    PairedEvent ev;
    if (presence.gen) ev.gen = FeatureVector{pair.truth};
    if (presence.sim) ev.sim = FeatureVector{pair.observed};
    out.synthetic.push_back(std::move(ev));
    if (cfg.record_smearing) out.synthetic_smearing.push_back(std::move(pair.draws));
  }
  return out;
}

/// Multidimensional toy: detector value = truth + sum of n_aux_smearings draws, with the first
/// n_observed_aux draws exposed as extra detector-level features. Noise, acceptance and
/// efficiency settings are ignored. All draws are made regardless of n_observed_aux, so the
/// same seed yields the same underlying sample for every feature count.
inline ToySample generate_gaussian_multidim(const ToyConfig& cfg, std::size_t n_observed_aux) {
  cfg.validate();
  if (n_observed_aux > cfg.n_aux_smearings)
    throw ConfigError("n_observed_aux (" + std::to_string(n_observed_aux) + ") exceeds n_aux_smearings (" +
                      std::to_string(cfg.n_aux_smearings) + ")");
  ToySample out;

  auto detector_features = [&](const detail::SmearedPair& p) {
    FeatureVector x;
    x.reserve(1 + n_observed_aux);
    x.push_back(p.observed);
    for (std::size_t i = 0; i < n_observed_aux; ++i) x.push_back(p.draws[i]);
    return x;
  };

  Rng data_rng(derive_seed(cfg.seed, {detail::kDataStream}));
  for (std::size_t i = 0; i < cfg.n_events; ++i) {
    const auto p = detail::smear(data_rng, data_rng.normal(cfg.truth_mean, cfg.truth_width), cfg);
    out.data.push_back(detector_features(p));
    out.data_is_background.push_back(false);
    out.truth_holdout.push_back({p.truth});
    out.signal_holdout.push_back(detector_features(p));
  }

  Rng synth_rng(derive_seed(cfg.seed, {detail::kSyntheticStream}));
  out.synthetic.reserve(cfg.n_events);
  for (std::size_t i = 0; i < cfg.n_events; ++i) {
    auto p = detail::smear(synth_rng, synth_rng.normal(cfg.prior_mean, cfg.prior_width), cfg);
    out.synthetic.push_back({FeatureVector{p.truth}, detector_features(p), 1.0});
    if (cfg.record_smearing) out.synthetic_smearing.push_back(std::move(p.draws));
  }
  return out;
}

/// Default configuration of the one-dimensional toy with all detector effects.
inline ToyConfig figure1_toy() { return ToyConfig{}; }

/// Default configuration of the multidimensional toy (four smearing draws, no losses).
/// The per-draw width 0.31 puts the total resolution at 0.62, which reproduces the published
/// single-feature prior bias after one iteration.
inline ToyConfig table1_toy() {
  ToyConfig c;
  c.truth_mean = 0.3;
  c.truth_width = 0.5;
  c.prior_mean = 0.0;
  c.prior_width = 1.0;
  c.smear_width = 0.31;
  c.n_aux_smearings = 4;
  c.noise_fraction = 0.0;
  c.acceptance_loss = 0.0;
  c.efficiency_loss = 0.0;
  return c;
}

}  // namespace unfoldkit
