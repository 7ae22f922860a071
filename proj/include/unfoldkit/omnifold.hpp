#pragma once

// Iterative classifier-based unfolding with background subtraction, acceptance and
// efficiency handling.
//
// Notation per synthetic pair i: x_G (generator level, may be absent), x_S (detector level,
// may be absent), w_synth (current weight). Data events x_D carry per-event weights w_D after
// background subtraction. Each iteration:
//
//   step1   r_I(x_S)     = ratio of w_D-weighted data to w_synth-weighted sim
//   pull    w_pull       = w_synth * r_I(x_S), or w_synth * E[r_I | x_G] when x_S is absent
//   step2   r_II(x_G)    = ratio of w_pull-weighted gen to w_synth-weighted gen
//   push    w_push       = w_synth * r_II(x_G), or w_synth * E[r_II | x_S] when x_G is absent
//           w_synth     <- w_push
//
// Every update multiplies the previous weight by the trained ratio. The bare-ratio form, in
// which each step's ratio replaces the weight, is available as UpdateConvention::literal.
//
// Ratios come from a RatioEstimator policy: NeuralRatioEstimator trains a classifier per step,
// HistogramRatioEstimator takes exact ratios of weighted histograms (the binned limit).

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "unfoldkit/dataset.hpp"
#include "unfoldkit/errors.hpp"
#include "unfoldkit/event_io.hpp"
#include "unfoldkit/histogram.hpp"
#include "unfoldkit/nn.hpp"
#include "unfoldkit/rng.hpp"
#include "unfoldkit/stats.hpp"

namespace unfoldkit {

enum class Role : std::uint64_t { background = 0, step1 = 1, miss_step1 = 2, step2 = 3, miss_step2 = 4 };

constexpr std::string_view role_name(Role r) {
  switch (r) {
    case Role::background: return "background";
    case Role::step1: return "step1";
    case Role::miss_step1: return "miss_step1";
    case Role::step2: return "step2";
    case Role::miss_step2: return "miss_step2";
  }
  return "?";
}

/// Whether a role's classifier sees detector-level (true) or generator-level features.
constexpr bool detector_level(Role r) { return r == Role::background || r == Role::step1 || r == Role::miss_step2; }

enum class UpdateConvention { multiplicative, literal };
enum class MissImputation { average, unity };

struct UnfoldConfig {
  std::size_t n_iterations = 3;
  nn::NetworkConfig background;
  nn::NetworkConfig step1;
  nn::NetworkConfig miss_step1;
  nn::NetworkConfig step2;
  nn::NetworkConfig miss_step2;
  double w_max = 100.0;
  bool enable_background = true;
  bool enable_acceptance = true;
  bool enable_efficiency = true;
  UpdateConvention convention = UpdateConvention::multiplicative;
  MissImputation miss_imputation = MissImputation::average;
  /// Start each role's classifier from the previous iteration's parameters.
  bool warm_start = false;
  /// Base seed for every classifier; each (iteration, role) gets its own derived stream.
  std::uint64_t seed = 0;
  /// Detector-level binning for the chi2 diagnostic; empty selects 20 bins over the central 99% of data.
  std::vector<double> diagnostic_edges;

  void validate() const {
    if (n_iterations == 0) throw ConfigError("unfold.n_iterations must be >= 1");
    if (!(w_max > 0.0) || !std::isfinite(w_max)) throw ConfigError("unfold.w_max must be finite and > 0");
    for (const auto* n : {&background, &step1, &miss_step1, &step2, &miss_step2}) n->validate();
  }

  const nn::NetworkConfig& network(Role r) const {
    switch (r) {
      case Role::background: return background;
      case Role::step1: return step1;
      case Role::miss_step1: return miss_step1;
      case Role::step2: return step2;
      case Role::miss_step2: return miss_step2;
    }
    return step1;
  }

  void set_all_networks(const nn::NetworkConfig& n) { background = step1 = miss_step1 = step2 = miss_step2 = n; }
};

/// A fitted ratio function plus its training diagnostics.
struct FittedRatio {
  std::function<std::vector<double>(const FeatureMatrix&)> evaluate;
  /// Best validation loss of a trained classifier; NaN for exact estimators.
  double validation_loss = std::numeric_limits<double>::quiet_NaN();
  std::size_t epochs = 0;

  std::vector<double> operator()(const FeatureMatrix& x) const { return evaluate(x); }
};

template <class E>
concept RatioEstimator = requires(E& e, Role role, std::size_t iteration, const nn::TrainingSet<double>& set) {
  { e.fit(role, iteration, set) } -> std::same_as<FittedRatio>;
};

/// Trains one float classifier per (iteration, role).
class NeuralRatioEstimator {
 public:
  explicit NeuralRatioEstimator(UnfoldConfig cfg) : cfg_(std::move(cfg)) {}

  FittedRatio fit(Role role, std::size_t iteration, const nn::TrainingSet<double>& set) {
    nn::NetworkConfig net = cfg_.network(role);
    net.input_dim = set.dim();
    net.seed = derive_seed(cfg_.seed, {iteration, static_cast<std::uint64_t>(role)});
    nn::TrainingSet<float> fset{set.features.cast<float>(), set.weight_a.cast<float>(), set.weight_b.cast<float>()};
    const nn::Classifier<float>* warm = nullptr;
    if (cfg_.warm_start) {
      auto it = previous_.find(role);
      if (it != previous_.end()) warm = it->second.get();
    }
    auto trained = std::make_shared<const nn::Classifier<float>>(nn::train(fset, net, warm));
    previous_[role] = trained;
    FittedRatio out;
    out.validation_loss = trained->history.best_validation_loss;
    out.epochs = trained->history.validation_loss.size();
    out.evaluate = [trained](const FeatureMatrix& x) { return trained->ratios(x); };
    return out;
  }

 private:
  UnfoldConfig cfg_;
  std::map<Role, std::shared_ptr<const nn::Classifier<float>>> previous_;
};

/// Exact weighted-histogram ratios on the first feature. Values outside the edges fall into
/// dedicated under/overflow bins. A bin with an empty denominator gets ratio 0.
class HistogramRatioEstimator {
 public:
  HistogramRatioEstimator(std::vector<double> detector_edges, std::vector<double> gen_edges)
      : detector_(std::move(detector_edges)), gen_(std::move(gen_edges)) {}

  FittedRatio fit(Role role, std::size_t iteration, const nn::TrainingSet<double>& set) {
    const Histogram1D& axis = detector_level(role) ? detector_ : gen_;
    const std::size_t n = axis.n_bins() + 2;
    auto bin_of = [&axis](double x) -> std::size_t {
      if (auto b = axis.find_bin(x)) return *b + 1;
      return x < axis.edges().front() ? 0 : axis.n_bins() + 1;
    };
    std::vector<double> num(n, 0.0), den(n, 0.0);
    for (Eigen::Index j = 0; j < set.features.cols(); ++j) {
      const std::size_t b = bin_of(set.features(0, j));
      num[b] += set.weight_a(j);
      den[b] += set.weight_b(j);
    }
    auto ratio = std::make_shared<std::vector<double>>(n, 0.0);
    for (std::size_t b = 0; b < n; ++b) {
      if (den[b] != 0.0) (*ratio)[b] = num[b] / den[b];
      else if (num[b] != 0.0)
        warnings.push_back("iteration " + std::to_string(iteration) + " " + std::string(role_name(role)) +
                           ": bin " + std::to_string(b) + " has numerator weight but no denominator support");
    }
    FittedRatio out;
    out.evaluate = [ratio, bin_of](const FeatureMatrix& x) {
      std::vector<double> r(static_cast<std::size_t>(x.cols()));
      for (Eigen::Index j = 0; j < x.cols(); ++j) r[static_cast<std::size_t>(j)] = (*ratio)[bin_of(x(0, j))];
      return r;
    };
    return out;
  }

  std::vector<std::string> warnings;

 private:
  Histogram1D detector_;
  Histogram1D gen_;
};

/// Per-synthetic-event weights of one iteration. Entries for events lacking the relevant side
/// (w_step1 without x_S, w_step2 without x_G) are zero.
struct WeightState {
  std::size_t iteration = 0;
  std::vector<double> w_synth;  // weight entering the iteration
  std::vector<double> w_step1;
  std::vector<double> w_pull;
  std::vector<double> w_step2;
  std::vector<double> w_push;
  std::vector<double> w_data;
};

struct IterationDiagnostics {
  std::size_t iteration = 0;
  std::map<std::string, double> validation_loss;  // by role
  std::map<std::string, std::size_t> epochs;      // by role
  double effective_sample_size = 0.0;             // of w_push over gen-present events
  double detector_chi2_per_bin = 0.0;             // w_step1 sim vs w_D data
  double normalization_ratio = 0.0;               // sum w_step1 / sum w_D
  double unfolded_mean = 0.0;                     // first gen feature, weighted by w_push
  double mean_relative_change = 0.0;              // sum |w_push - w_synth| / sum w_synth
};

struct UnfoldResult {
  /// Synthetic indices of gen-present events, in order.
  std::vector<std::size_t> event_ids;
  /// Generator-level sample with the final weights.
  EventSet sample;
  std::vector<double> w_data;
  std::vector<WeightState> snapshots;
  std::vector<IterationDiagnostics> diagnostics;
  std::vector<std::string> warnings;

  /// Gen-present weights after iteration k (1-based).
  std::vector<double> weights_after(std::size_t k) const {
    const auto& push = snapshots.at(k - 1).w_push;
    std::vector<double> w;
    w.reserve(event_ids.size());
    for (std::size_t id : event_ids) w.push_back(push[id]);
    return w;
  }
};

namespace detail {

inline std::vector<std::size_t> indices_where(const std::vector<PairedEvent>& s, auto pred) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (pred(s[i])) out.push_back(i);
  return out;
}

inline FeatureMatrix side_matrix(const std::vector<PairedEvent>& s, std::span<const std::size_t> ids, bool gen) {
  if (ids.empty()) return FeatureMatrix(0, 0);
  const std::size_t dim = gen ? s[ids[0]].gen->size() : s[ids[0]].sim->size();
  FeatureMatrix m(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(ids.size()));
  for (std::size_t j = 0; j < ids.size(); ++j) {
    const FeatureVector& v = gen ? *s[ids[j]].gen : *s[ids[j]].sim;
    if (v.size() != dim) throw UnfoldError("synthetic pair " + std::to_string(ids[j]) + " has a ragged feature dimension");
    for (std::size_t i = 0; i < dim; ++i) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v[i];
  }
  return m;
}

inline std::vector<double> gather(const std::vector<double>& w, std::span<const std::size_t> ids) {
  std::vector<double> out;
  out.reserve(ids.size());
  for (std::size_t i : ids) out.push_back(w[i]);
  return out;
}

inline double clamp_weight(double w, double hi) { return std::isfinite(w) ? std::clamp(w, 0.0, hi) : hi; }

inline void check_weights(const std::vector<PairedEvent>& synthetic, const std::vector<double>& w, const char* name) {
  if (w.size() != synthetic.size())
    throw UnfoldError(std::string(name) + " has " + std::to_string(w.size()) + " entries for " +
                      std::to_string(synthetic.size()) + " synthetic events");
}

}  // namespace detail

/// Per-data-event weights after background subtraction: the data weight times the clamped
/// purity ratio learned from (data with +weights, noise with negated weights) vs data.
/// Returns the data weights unchanged when background handling is disabled.
template <RatioEstimator E>
std::vector<double> subtract_background(E& estimator, const EventSet& data, const EventSet& noise_mc,
                                        const UnfoldConfig& cfg) {
  data.validate("data");
  if (data.empty()) throw UnfoldError("data set is empty");
  if (!cfg.enable_background) return data.weights;
  if (noise_mc.empty()) throw UnfoldError("background subtraction enabled but the noise sample is empty");
  noise_mc.validate("noise");
  if (noise_mc.dimension() != data.dimension()) throw UnfoldError("noise and data feature dimensions differ");
  if (!(noise_mc.total_weight() < data.total_weight()))
    throw UnfoldError("noise weight must be smaller than the data weight");

  const FeatureMatrix xd = to_matrix(data);
  const FeatureMatrix xn = to_matrix(noise_mc);
  FeatureMatrix x(xd.rows(), xd.cols() + xn.cols());
  x << xd, xn;
  std::vector<double> wa(data.weights), wb(data.weights);
  for (double w : noise_mc.weights) {
    wa.push_back(-w);
    wb.push_back(0.0);
  }
  const auto fitted = estimator.fit(Role::background, 0, nn::TrainingSet<double>::paired(x, wa, wb));
  auto purity = fitted(xd);
  for (std::size_t i = 0; i < purity.size(); ++i) purity[i] = data.weights[i] * std::clamp(purity[i], 0.0, 1.0);
  return purity;
}

/// Ratio r_I of w_D-weighted data to w_synth-weighted simulation, evaluated at every
/// sim-present event (zero for sim-absent events).
template <RatioEstimator E>
std::vector<double> step1(E& estimator, const std::vector<PairedEvent>& synthetic, const std::vector<double>& w_synth,
                          const EventSet& data, const std::vector<double>& w_data, const UnfoldConfig& /*cfg*/,
                          std::size_t iteration = 1, FittedRatio* fitted_out = nullptr) {
  detail::check_weights(synthetic, w_synth, "w_synth");
  if (w_data.size() != data.size()) throw UnfoldError("w_data length differs from the data size");
  const auto sim_ids = detail::indices_where(synthetic, [](const PairedEvent& p) { return p.sim.has_value(); });
  if (sim_ids.empty()) throw UnfoldError("step1 needs at least one sim-present synthetic event");
  const FeatureMatrix xs = detail::side_matrix(synthetic, sim_ids, false);
  if (static_cast<std::size_t>(xs.rows()) != data.dimension())
    throw UnfoldError("sim features have dimension " + std::to_string(xs.rows()) + ", data has " +
                      std::to_string(data.dimension()));
  const auto set = nn::TrainingSet<double>::two_class(to_matrix(data), w_data, xs, detail::gather(w_synth, sim_ids));
  auto fitted = estimator.fit(Role::step1, iteration, set);
  const auto r = fitted(xs);
  std::vector<double> out(synthetic.size(), 0.0);
  for (std::size_t k = 0; k < sim_ids.size(); ++k) out[sim_ids[k]] = r[k];
  if (fitted_out) *fitted_out = std::move(fitted);
  return out;
}

/// Moves the step1 weights to every event. Sim-absent events get the conditional average
/// multiplier E[r_I | x_G] under the w_synth-weighted simulation (or 1 with
/// MissImputation::unity or efficiency handling disabled).
template <RatioEstimator E>
std::vector<double> pull(E& estimator, const std::vector<PairedEvent>& synthetic, const std::vector<double>& r_step1,
                         const std::vector<double>& w_synth, const UnfoldConfig& cfg, std::size_t iteration = 1,
                         FittedRatio* fitted_out = nullptr) {
  detail::check_weights(synthetic, r_step1, "r_step1");
  detail::check_weights(synthetic, w_synth, "w_synth");
  const bool literal = cfg.convention == UpdateConvention::literal;
  const auto sim_ids = detail::indices_where(synthetic, [](const PairedEvent& p) { return p.sim.has_value(); });
  if (sim_ids.empty()) throw UnfoldError("pull needs at least one sim-present synthetic event");

  std::vector<double> w_pull(synthetic.size(), 0.0);
  for (std::size_t i : sim_ids) w_pull[i] = detail::clamp_weight(literal ? r_step1[i] : w_synth[i] * r_step1[i], cfg.w_max);

  const auto missing = detail::indices_where(synthetic, [](const PairedEvent& p) { return !p.sim && p.gen; });
  if (missing.empty()) return w_pull;
  if (!cfg.enable_efficiency || cfg.miss_imputation == MissImputation::unity) {
    for (std::size_t i : missing) w_pull[i] = literal ? 1.0 : detail::clamp_weight(w_synth[i], cfg.w_max);
    return w_pull;
  }
  const auto both = detail::indices_where(synthetic, [](const PairedEvent& p) { return p.sim && p.gen; });
  if (both.empty()) throw UnfoldError("efficiency imputation needs events with both gen and sim present");
  const FeatureMatrix xg = detail::side_matrix(synthetic, both, true);
  // Multiplicative mode averages the multiplier under the current w_synth weighting.
  std::vector<double> target(both.size()), base(both.size(), 1.0);
  for (std::size_t k = 0; k < both.size(); ++k) {
    const std::size_t i = both[k];
    if (literal) {
      target[k] = w_pull[i];
    } else {
      target[k] = w_synth[i] * r_step1[i];
      base[k] = w_synth[i];
    }
  }
  auto fitted = estimator.fit(Role::miss_step1, iteration, nn::TrainingSet<double>::paired(xg, target, base));
  const auto m = fitted(detail::side_matrix(synthetic, missing, true));
  for (std::size_t k = 0; k < missing.size(); ++k) {
    const std::size_t i = missing[k];
    w_pull[i] = detail::clamp_weight(literal ? m[k] : w_synth[i] * m[k], cfg.w_max);
  }
  if (fitted_out) *fitted_out = std::move(fitted);
  return w_pull;
}

/// Ratio r_II of w_pull-weighted to w_synth-weighted generator-level events, evaluated at
/// every gen-present event (zero for gen-absent events). w_synth * r_II estimates E[w_pull | x_G].
template <RatioEstimator E>
std::vector<double> step2(E& estimator, const std::vector<PairedEvent>& synthetic, const std::vector<double>& w_pull,
                          const std::vector<double>& w_synth, const UnfoldConfig& /*cfg*/, std::size_t iteration = 1,
                          FittedRatio* fitted_out = nullptr) {
  detail::check_weights(synthetic, w_pull, "w_pull");
  detail::check_weights(synthetic, w_synth, "w_synth");
  const auto gen_ids = detail::indices_where(synthetic, [](const PairedEvent& p) { return p.gen.has_value(); });
  if (gen_ids.empty()) throw UnfoldError("step2 needs at least one gen-present synthetic event");
  const FeatureMatrix xg = detail::side_matrix(synthetic, gen_ids, true);
  auto fitted = estimator.fit(
      Role::step2, iteration,
      nn::TrainingSet<double>::paired(xg, detail::gather(w_pull, gen_ids), detail::gather(w_synth, gen_ids)));
  const auto r = fitted(xg);
  std::vector<double> out(synthetic.size(), 0.0);
  for (std::size_t k = 0; k < gen_ids.size(); ++k) out[gen_ids[k]] = r[k];
  if (fitted_out) *fitted_out = std::move(fitted);
  return out;
}

/// New synthetic weights. Gen-present events take w_synth * r_II; gen-absent events take
/// w_synth * E[r_II | x_S], again w_synth-weighted (or w_synth with MissImputation::unity or
/// acceptance handling disabled).
template <RatioEstimator E>
std::vector<double> push(E& estimator, const std::vector<PairedEvent>& synthetic, const std::vector<double>& r_step2,
                         const std::vector<double>& w_synth, const UnfoldConfig& cfg, std::size_t iteration = 1,
                         FittedRatio* fitted_out = nullptr) {
  detail::check_weights(synthetic, r_step2, "r_step2");
  detail::check_weights(synthetic, w_synth, "w_synth");
  const bool literal = cfg.convention == UpdateConvention::literal;
  const auto gen_ids = detail::indices_where(synthetic, [](const PairedEvent& p) { return p.gen.has_value(); });
  if (gen_ids.empty()) throw UnfoldError("push needs at least one gen-present synthetic event");

  std::vector<double> w_push(synthetic.size(), 0.0);
  for (std::size_t i : gen_ids) w_push[i] = detail::clamp_weight(literal ? r_step2[i] : w_synth[i] * r_step2[i], cfg.w_max);

  const auto missing = detail::indices_where(synthetic, [](const PairedEvent& p) { return !p.gen && p.sim; });
  if (missing.empty()) return w_push;
  if (!cfg.enable_acceptance || cfg.miss_imputation == MissImputation::unity) {
    for (std::size_t i : missing) w_push[i] = literal ? 1.0 : detail::clamp_weight(w_synth[i], cfg.w_max);
    return w_push;
  }
  const auto both = detail::indices_where(synthetic, [](const PairedEvent& p) { return p.sim && p.gen; });
  if (both.empty()) throw UnfoldError("acceptance imputation needs events with both gen and sim present");
  const FeatureMatrix xs = detail::side_matrix(synthetic, both, false);
  // Multiplicative mode averages the multiplier under the current w_synth weighting.
  std::vector<double> target(both.size()), base(both.size(), 1.0);
  for (std::size_t k = 0; k < both.size(); ++k) {
    const std::size_t i = both[k];
    if (literal) {
      target[k] = w_push[i];
    } else {
      target[k] = w_synth[i] * r_step2[i];
      base[k] = w_synth[i];
    }
  }
  auto fitted = estimator.fit(Role::miss_step2, iteration, nn::TrainingSet<double>::paired(xs, target, base));
  const auto m = fitted(detail::side_matrix(synthetic, missing, false));
  for (std::size_t k = 0; k < missing.size(); ++k) {
    const std::size_t i = missing[k];
    w_push[i] = detail::clamp_weight(literal ? m[k] : w_synth[i] * m[k], cfg.w_max);
  }
  if (fitted_out) *fitted_out = std::move(fitted);
  return w_push;
}

namespace detail {

inline std::vector<double> auto_diagnostic_edges(const EventSet& data) {
  std::vector<double> v;
  v.reserve(data.size());
  for (const auto& x : data.events) v.push_back(x.at(0));
  auto quantile = [&v](double q) {
    auto k = static_cast<std::size_t>(q * static_cast<double>(v.size() - 1));
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
    return v[k];
  };
  double lo = quantile(0.005), hi = quantile(0.995);
  if (!(lo < hi)) {
    lo -= 0.5;
    hi += 0.5;
  }
  return Histogram1D::uniform_edges(20, lo, hi);
}

inline void record(IterationDiagnostics& d, Role role, const FittedRatio& f) {
  d.validation_loss[std::string(role_name(role))] = f.validation_loss;
  d.epochs[std::string(role_name(role))] = f.epochs;
}

}  // namespace detail

/// Background subtraction once, then cfg.n_iterations of step1, pull, step2, push.
template <RatioEstimator E>
UnfoldResult run_with(E& estimator, const EventSet& data, const EventSet& noise_mc,
                      const std::vector<PairedEvent>& synthetic, const UnfoldConfig& cfg) {
  cfg.validate();
  if (synthetic.empty()) throw UnfoldError("synthetic sample is empty");
  for (std::size_t i = 0; i < synthetic.size(); ++i) {
    const auto& p = synthetic[i];
    if (!p.gen && !p.sim) throw UnfoldError("synthetic pair " + std::to_string(i) + " has neither side");
    if (!std::isfinite(p.weight)) throw UnfoldError("synthetic pair " + std::to_string(i) + " has a non-finite weight");
  }

  UnfoldResult result;
  result.w_data = subtract_background(estimator, data, noise_mc, cfg);
  const double total_data = std::accumulate(result.w_data.begin(), result.w_data.end(), 0.0);

  const auto sim_ids = detail::indices_where(synthetic, [](const PairedEvent& p) { return p.sim.has_value(); });
  const auto gen_ids = detail::indices_where(synthetic, [](const PairedEvent& p) { return p.gen.has_value(); });
  std::vector<double> sim_values, data_values, gen_values;
  for (std::size_t i : sim_ids) sim_values.push_back(synthetic[i].sim->at(0));
  for (std::size_t i : gen_ids) gen_values.push_back(synthetic[i].gen->at(0));
  for (const auto& x : data.events) data_values.push_back(x.at(0));
  const auto diag_edges = cfg.diagnostic_edges.empty() ? detail::auto_diagnostic_edges(data) : cfg.diagnostic_edges;
  const Histogram1D data_hist = weighted_hist(data_values, result.w_data, diag_edges);

  std::vector<double> w_synth(synthetic.size());
  for (std::size_t i = 0; i < synthetic.size(); ++i) w_synth[i] = detail::clamp_weight(synthetic[i].weight, cfg.w_max);

  for (std::size_t k = 1; k <= cfg.n_iterations; ++k) {
    WeightState state;
    IterationDiagnostics diag;
    state.iteration = diag.iteration = k;
    state.w_synth = w_synth;
    state.w_data = result.w_data;
    try {
      FittedRatio f1, fm1, f2, fm2;
      const auto r1 = step1(estimator, synthetic, w_synth, data, result.w_data, cfg, k, &f1);
      detail::record(diag, Role::step1, f1);
      state.w_step1.assign(synthetic.size(), 0.0);
      for (std::size_t i : sim_ids)
        state.w_step1[i] = detail::clamp_weight(
            cfg.convention == UpdateConvention::literal ? r1[i] : w_synth[i] * r1[i], cfg.w_max);

      state.w_pull = pull(estimator, synthetic, r1, w_synth, cfg, k, &fm1);
      if (fm1.evaluate) detail::record(diag, Role::miss_step1, fm1);
      const auto r2 = step2(estimator, synthetic, state.w_pull, w_synth, cfg, k, &f2);
      detail::record(diag, Role::step2, f2);
      state.w_step2.assign(synthetic.size(), 0.0);
      for (std::size_t i : gen_ids)
        state.w_step2[i] = detail::clamp_weight(
            cfg.convention == UpdateConvention::literal ? r2[i] : w_synth[i] * r2[i], cfg.w_max);

      state.w_push = push(estimator, synthetic, r2, w_synth, cfg, k, &fm2);
      if (fm2.evaluate) detail::record(diag, Role::miss_step2, fm2);
    } catch (const TrainingError& e) {
      throw TrainingError("iteration " + std::to_string(k) + ": " + e.what());
    } catch (const UnfoldError& e) {
      throw UnfoldError("iteration " + std::to_string(k) + ": " + e.what());
    }

    const auto w_sim = detail::gather(state.w_step1, sim_ids);
    const auto w_gen = detail::gather(state.w_push, gen_ids);
    diag.detector_chi2_per_bin = chi2_per_bin(weighted_hist(sim_values, w_sim, diag_edges), data_hist);
    diag.normalization_ratio = std::accumulate(w_sim.begin(), w_sim.end(), 0.0) / total_data;
    diag.effective_sample_size = effective_sample_size(w_gen);
    double sw = 0.0;
    for (double w : w_gen) sw += w;
    diag.unfolded_mean = sw > 0.0 ? weighted_mean(gen_values, w_gen) : std::numeric_limits<double>::quiet_NaN();
    double change = 0.0, base = 0.0;
    for (std::size_t i : gen_ids) {
      change += std::abs(state.w_push[i] - w_synth[i]);
      base += w_synth[i];
    }
    diag.mean_relative_change = base > 0.0 ? change / base : 0.0;

    w_synth = state.w_push;
    result.snapshots.push_back(std::move(state));
    result.diagnostics.push_back(std::move(diag));
  }

  result.event_ids = gen_ids;
  for (std::size_t i : gen_ids) result.sample.push_back(*synthetic[i].gen, w_synth[i]);
  return result;
}

/// Unbinned unfolding with neural-network classifiers.
inline UnfoldResult run(const EventSet& data, const EventSet& noise_mc, const std::vector<PairedEvent>& synthetic,
                        const UnfoldConfig& cfg) {
  NeuralRatioEstimator estimator(cfg);
  return run_with(estimator, data, noise_mc, synthetic, cfg);
}

struct BinnedUnfoldResult {
  UnfoldResult unfold;
  /// Generator-level histogram of the synthetic sample after each iteration.
  std::vector<Histogram1D> gen_histograms;
  std::vector<std::string> warnings;
};

/// Weighted events at the bin centers of a histogram (empty bins skipped).
inline EventSet events_from_histogram(const Histogram1D& h) {
  EventSet s;
  for (std::size_t i = 0; i < h.n_bins(); ++i)
    if (h.contents()[i] != 0.0) s.push_back({h.center(i)}, h.contents()[i]);
  return s;
}

/// The unfolding loop with every classifier replaced by exact histogram ratios. Data and
/// noise enter as histograms on the detector binning; synthetic pairs are binned on their
/// first feature. A side outside its binning is treated as absent (undetected sim side,
/// out-of-acceptance gen side); pairs left with no side are dropped. Output gen-level
/// histograms use gen_edges.
inline BinnedUnfoldResult run_binned(const Histogram1D& data_hist, const std::optional<Histogram1D>& noise_hist,
                                     const std::vector<PairedEvent>& synthetic, const std::vector<double>& gen_edges,
                                     const UnfoldConfig& cfg) {
  if (noise_hist && !noise_hist->same_binning(data_hist)) throw UnfoldError("noise and data histograms differ in binning");
  const Histogram1D gen_axis(gen_edges);
  std::vector<PairedEvent> binned;
  binned.reserve(synthetic.size());
  for (PairedEvent p : synthetic) {
    if (p.sim && !data_hist.find_bin(p.sim->at(0))) p.sim.reset();
    if (p.gen && !gen_axis.find_bin(p.gen->at(0))) p.gen.reset();
    if (p.sim || p.gen) binned.push_back(std::move(p));
  }
  HistogramRatioEstimator estimator(data_hist.edges(), gen_edges);
  const EventSet data = events_from_histogram(data_hist);
  const EventSet noise = noise_hist ? events_from_histogram(*noise_hist) : EventSet{};
  BinnedUnfoldResult out;
  out.unfold = run_with(estimator, data, noise, binned, cfg);
  std::vector<double> gen_values;
  for (const auto& x : out.unfold.sample.events) gen_values.push_back(x.at(0));
  for (std::size_t k = 1; k <= cfg.n_iterations; ++k)
    out.gen_histograms.push_back(weighted_hist(gen_values, out.unfold.weights_after(k), gen_edges));
  out.warnings = estimator.warnings;
  return out;
}

/// event_id,w_iter1,...,w_iterK for every gen-present synthetic event.
inline void write_weights_csv(const std::string& path, const UnfoldResult& r) {
  auto out = csv::open_out(path);
  out << "event_id";
  for (std::size_t k = 1; k <= r.snapshots.size(); ++k) out << ",w_iter" << k;
  out << '\n';
  for (std::size_t id : r.event_ids) {
    out << id;
    for (const auto& s : r.snapshots) out << ',' << csv::format_number(s.w_push[id]);
    out << '\n';
  }
  if (!out) throw IoError("write to '" + path + "' failed");
}

inline nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline nlohmann::json diagnostics_json(const UnfoldResult& r) {
  nlohmann::json iters = nlohmann::json::array();
  for (const auto& d : r.diagnostics) {
    nlohmann::json losses = nlohmann::json::object(), epochs = nlohmann::json::object();
    for (const auto& [role, v] : d.validation_loss) losses[role] = finite_or_null(v);
    for (const auto& [role, v] : d.epochs) epochs[role] = v;
    iters.push_back({{"iteration", d.iteration},
                     {"validation_loss", losses},
                     {"epochs", epochs},
                     {"effective_sample_size", finite_or_null(d.effective_sample_size)},
                     {"detector_chi2_per_bin", finite_or_null(d.detector_chi2_per_bin)},
                     {"normalization_ratio", finite_or_null(d.normalization_ratio)},
                     {"unfolded_mean", finite_or_null(d.unfolded_mean)},
                     {"mean_relative_change", finite_or_null(d.mean_relative_change)}});
  }
  double total_data = 0.0;
  for (double w : r.w_data) total_data += w;
  return {{"n_events", r.event_ids.size()},
          {"background_subtracted_yield", total_data},
          {"iterations", iters},
          {"warnings", r.warnings}};
}

}  // namespace unfoldkit
