#pragma once

// Ensemble experiments on the Gaussian toys: the feature-count x iteration sweep of the
// multidimensional toy and the histogram bundle of the one-dimensional toy.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "unfoldkit/binned.hpp"
#include "unfoldkit/dataset.hpp"
#include "unfoldkit/omnifold.hpp"
#include "unfoldkit/rng.hpp"
#include "unfoldkit/stats.hpp"
#include "unfoldkit/table1_reference.hpp"

namespace unfoldkit {

/// Runs body(i) for i in [0, n) on `jobs` threads. Exceptions are collected per index and the
/// first one (by index) is rethrown after all workers finish.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& body) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        body(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  jobs = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(n, 1));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct EnsembleSpec {
  ToyConfig base = table1_toy();
  std::size_t n_replicates = 20;
  std::vector<std::size_t> checkpoints{1, 2, 4, 8};
  /// Detector-level feature counts N; N = 1 + number of observed smearing draws.
  std::vector<std::size_t> feature_counts{1, 2, 3, 4, 5};
  std::size_t jobs = 1;
  /// Network settings and base seed for the unfoldings. Background, acceptance and efficiency
  /// handling are switched off and n_iterations is set to the last checkpoint.
  UnfoldConfig unfold;

  void validate() const {
    base.validate();
    if (n_replicates < 2) throw ConfigError("benchmark.n_replicates must be >= 2");
    if (checkpoints.empty()) throw ConfigError("benchmark.checkpoints must not be empty");
    for (std::size_t i = 0; i < checkpoints.size(); ++i)
      if (checkpoints[i] == 0 || (i > 0 && checkpoints[i] <= checkpoints[i - 1]))
        throw ConfigError("benchmark.checkpoints must be positive and strictly increasing");
    if (feature_counts.empty()) throw ConfigError("benchmark.feature_counts must not be empty");
    for (std::size_t n : feature_counts)
      if (n < 1 || n > base.n_aux_smearings + 1)
        throw ConfigError("benchmark.feature_counts entries must lie in [1, n_aux_smearings + 1]");
  }
};

struct EnsembleCell {
  std::size_t n_features = 0;
  std::size_t iterations = 0;
  double mean = 0.0;      // mean over replicates of the unfolded weighted mean
  double std_dev = 0.0;   // sample standard deviation over replicates
  double se_mean = 0.0;   // std / sqrt(n)
  double se_std = 0.0;    // std / sqrt(2 (n - 1))
  std::vector<double> replicate_means;
  std::optional<reference::Value> reference_mean;
  std::optional<reference::Value> reference_std;
  /// Within two combined standard errors of the reference (when tabulated).
  std::optional<bool> mean_consistent;
  std::optional<bool> std_consistent;
};

struct TrendCheck {
  std::string name;
  bool passed = true;
  std::string detail;
};

struct EnsembleReport {
  std::size_t n_replicates = 0;
  double truth_mean = 0.0;
  std::vector<std::size_t> checkpoints;
  std::vector<std::size_t> feature_counts;
  std::vector<EnsembleCell> cells;
  std::vector<TrendCheck> trends;

  const EnsembleCell& cell(std::size_t n_features, std::size_t iterations) const {
    for (const auto& c : cells)
      if (c.n_features == n_features && c.iterations == iterations) return c;
    throw UnfoldError("no ensemble cell for N=" + std::to_string(n_features) + ", iterations=" + std::to_string(iterations));
  }
};

namespace detail {

inline EnsembleCell summarize(std::size_t n, std::size_t iterations, std::vector<double> means) {
  EnsembleCell c;
  c.n_features = n;
  c.iterations = iterations;
  const double count = static_cast<double>(means.size());
  double s = 0.0;
  for (double m : means) s += m;
  c.mean = s / count;
  double ss = 0.0;
  for (double m : means) ss += (m - c.mean) * (m - c.mean);
  c.std_dev = std::sqrt(ss / (count - 1.0));
  c.se_mean = c.std_dev / std::sqrt(count);
  c.se_std = c.std_dev / std::sqrt(2.0 * (count - 1.0));
  c.replicate_means = std::move(means);
  reference::Value rm{}, rs{};
  if (reference::lookup(n, iterations, rm, rs)) {
    c.reference_mean = rm;
    c.reference_std = rs;
    c.mean_consistent = std::abs(c.mean - rm.value) <= 2.0 * std::hypot(c.se_mean, rm.error);
    c.std_consistent = std::abs(c.std_dev - rs.value) <= 2.0 * std::hypot(c.se_std, rs.error);
  }
  return c;
}

inline std::string fmt(double v, int precision) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

inline std::vector<TrendCheck> trend_checks(const EnsembleReport& r) {
  std::vector<TrendCheck> out;
  for (std::size_t k : r.checkpoints) {
    TrendCheck t{"std non-increasing in N at " + std::to_string(k) + " iteration(s)", true, ""};
    for (std::size_t i = 1; i < r.feature_counts.size(); ++i) {
      const auto& a = r.cell(r.feature_counts[i - 1], k);
      const auto& b = r.cell(r.feature_counts[i], k);
      if (b.std_dev > a.std_dev + 2.0 * std::hypot(a.se_std, b.se_std)) {
        t.passed = false;
        t.detail += "N=" + std::to_string(b.n_features) + " std " + fmt(b.std_dev, 5) + " exceeds N=" +
                    std::to_string(a.n_features) + " std " + fmt(a.std_dev, 5) + "; ";
      }
    }
    out.push_back(std::move(t));
  }
  if (std::find(r.feature_counts.begin(), r.feature_counts.end(), 1) != r.feature_counts.end() &&
      r.checkpoints.size() > 1) {
    TrendCheck t{"N=1 bias decreases with iterations", true, ""};
    for (std::size_t i = 1; i < r.checkpoints.size(); ++i) {
      const auto& a = r.cell(1, r.checkpoints[i - 1]);
      const auto& b = r.cell(1, r.checkpoints[i]);
      const double ba = std::abs(a.mean - r.truth_mean), bb = std::abs(b.mean - r.truth_mean);
      if (!(bb < ba + 2.0 * std::hypot(a.se_mean, b.se_mean))) {
        t.passed = false;
        t.detail += "bias at " + std::to_string(b.iterations) + " (" + fmt(bb, 5) + ") not below bias at " +
                    std::to_string(a.iterations) + " (" + fmt(ba, 5) + "); ";
      }
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace detail

/// Unfolded weighted means of one replicate at every checkpoint.
inline std::vector<double> run_replicate(const EnsembleSpec& spec, std::size_t n_features, std::size_t replicate) {
  ToyConfig toy = spec.base;
  toy.seed = derive_seed(spec.base.seed, {replicate});
  const ToySample sample = generate_gaussian_multidim(toy, n_features - 1);
  UnfoldConfig cfg = spec.unfold;
  cfg.enable_background = cfg.enable_acceptance = cfg.enable_efficiency = false;
  cfg.n_iterations = spec.checkpoints.back();
  cfg.seed = derive_seed(spec.unfold.seed, {replicate, n_features});
  const UnfoldResult result = run(sample.data, sample.noise_mc, sample.synthetic, cfg);
  std::vector<double> means;
  for (std::size_t k : spec.checkpoints) means.push_back(result.diagnostics.at(k - 1).unfolded_mean);
  return means;
}

/// The feature-count x iteration ensemble. Each (N, replicate) task is independent and
/// seeded from (base seed, replicate), so the report does not depend on spec.jobs.
inline EnsembleReport run_table1(const EnsembleSpec& spec,
                                 const std::function<void(std::size_t, std::size_t)>& on_done = {}) {
  spec.validate();
  const std::size_t n_tasks = spec.feature_counts.size() * spec.n_replicates;
  std::vector<std::vector<double>> task_means(n_tasks);
  std::mutex progress;
  parallel_for(n_tasks, spec.jobs, [&](std::size_t t) {
    const std::size_t n = spec.feature_counts[t / spec.n_replicates];
    const std::size_t r = t % spec.n_replicates;
    try {
      task_means[t] = run_replicate(spec, n, r);
    } catch (const std::exception& e) {
      throw UnfoldError("N=" + std::to_string(n) + ", replicate " + std::to_string(r) + ": " + e.what());
    }
    if (on_done) {
      std::lock_guard lock(progress);
      on_done(n, r);
    }
  });

  EnsembleReport report;
  report.n_replicates = spec.n_replicates;
  report.truth_mean = spec.base.truth_mean;
  report.checkpoints = spec.checkpoints;
  report.feature_counts = spec.feature_counts;
  for (std::size_t ni = 0; ni < spec.feature_counts.size(); ++ni) {
    for (std::size_t ci = 0; ci < spec.checkpoints.size(); ++ci) {
      std::vector<double> means;
      for (std::size_t r = 0; r < spec.n_replicates; ++r) means.push_back(task_means[ni * spec.n_replicates + r][ci]);
      report.cells.push_back(detail::summarize(spec.feature_counts[ni], spec.checkpoints[ci], std::move(means)));
    }
  }
  report.trends = detail::trend_checks(report);
  return report;
}

inline nlohmann::json to_json(const EnsembleReport& r) {
  auto opt = [](const std::optional<reference::Value>& v) {
    return v ? nlohmann::json{{"value", v->value}, {"error", v->error}} : nlohmann::json(nullptr);
  };
  auto optb = [](const std::optional<bool>& b) { return b ? nlohmann::json(*b) : nlohmann::json(nullptr); };
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : r.cells)
    cells.push_back({{"n_features", c.n_features},
                     {"iterations", c.iterations},
                     {"mean", c.mean},
                     {"std", c.std_dev},
                     {"se_mean", c.se_mean},
                     {"se_std", c.se_std},
                     {"replicate_means", c.replicate_means},
                     {"reference_mean", opt(c.reference_mean)},
                     {"reference_std", opt(c.reference_std)},
                     {"mean_consistent", optb(c.mean_consistent)},
                     {"std_consistent", optb(c.std_consistent)}});
  nlohmann::json trends = nlohmann::json::array();
  for (const auto& t : r.trends) trends.push_back({{"name", t.name}, {"passed", t.passed}, {"detail", t.detail}});
  return {{"n_replicates", r.n_replicates},
          {"truth_mean", r.truth_mean},
          {"checkpoints", r.checkpoints},
          {"feature_counts", r.feature_counts},
          {"cells", cells},
          {"trends", trends}};
}

/// Plain-text table: mean (x 10^2) and std (x 10^3) blocks, one row per N, one column per
/// checkpoint, with standard errors in parentheses.
inline std::string format_table(const EnsembleReport& r) {
  std::ostringstream os;
  os << "unfolded mean over " << r.n_replicates << " replicates (truth " << r.truth_mean << ")\n";
  os << std::setw(4) << "N" << " |";
  for (std::size_t k : r.checkpoints) os << std::setw(14) << ("mean@" + std::to_string(k));
  os << " |";
  for (std::size_t k : r.checkpoints) os << std::setw(12) << ("std@" + std::to_string(k));
  os << '\n';
  for (std::size_t n : r.feature_counts) {
    os << std::setw(4) << n << " |";
    for (std::size_t k : r.checkpoints) {
      const auto& c = r.cell(n, k);
      os << std::setw(14) << (detail::fmt(c.mean * 1e2, 2) + "(" + detail::fmt(c.se_mean * 1e2, 2) + ")");
    }
    os << " |";
    for (std::size_t k : r.checkpoints) {
      const auto& c = r.cell(n, k);
      os << std::setw(12) << (detail::fmt(c.std_dev * 1e3, 1) + "(" + detail::fmt(c.se_std * 1e3, 1) + ")");
    }
    os << '\n';
  }
  os << "(mean x 10^2, std x 10^3; standard errors in parentheses)\n";
  for (const auto& t : r.trends) os << (t.passed ? "[ok]   " : "[FAIL] ") << t.name << (t.detail.empty() ? "" : ": " + t.detail) << '\n';
  return os.str();
}

struct Figure1Config {
  ToyConfig toy = figure1_toy();
  UnfoldConfig unfold = [] {
    UnfoldConfig c;
    c.n_iterations = 4;
    return c;
  }();
  /// Iteration shown as the final result; the following iteration is used for the stability check.
  std::size_t show_iteration = 3;
  std::vector<double> edges = Histogram1D::uniform_edges(20, -3.0, 3.0);
};

struct Figure1Bundle {
  /// Detector level: data, noise, subtracted, noiseless, sim, reweighted_sim.
  std::map<std::string, Histogram1D> detector;
  /// Generator level: prior, truth, unfolded, unfolded_next.
  std::map<std::string, Histogram1D> generator;
  double chi2_subtracted_vs_noiseless = 0.0;
  double chi2_reweighted_vs_subtracted = 0.0;
  double chi2_unfolded_vs_truth = 0.0;
  double l1_unfolded_vs_next = 0.0;
  UnfoldResult result;
};

/// Runs the one-dimensional toy end to end and histograms every stage.
inline Figure1Bundle run_figure1(const Figure1Config& cfg) {
  if (cfg.show_iteration < 1 || cfg.unfold.n_iterations < cfg.show_iteration + 1)
    throw ConfigError("figure1 needs unfold.n_iterations >= show_iteration + 1");
  const ToySample toy = generate_gaussian_1d(cfg.toy);
  Figure1Bundle b;
  b.result = run(toy.data, toy.noise_mc, toy.synthetic, cfg.unfold);

  auto first = [](const std::vector<FeatureVector>& v) {
    std::vector<double> out;
    out.reserve(v.size());
    for (const auto& x : v) out.push_back(x.at(0));
    return out;
  };
  const auto data_x = first(toy.data.events);
  std::vector<double> sim_x, sim_w, prior_x, prior_w;
  const auto& shown = b.result.snapshots.at(cfg.show_iteration - 1);
  for (std::size_t i = 0; i < toy.synthetic.size(); ++i) {
    const auto& p = toy.synthetic[i];
    if (p.sim) {
      sim_x.push_back(p.sim->at(0));
      sim_w.push_back(shown.w_step1[i]);
    }
    if (p.gen) {
      prior_x.push_back(p.gen->at(0));
      prior_w.push_back(p.weight);
    }
  }
  std::vector<double> sim_unit(sim_x.size(), 1.0);
  const auto gen_x = first(b.result.sample.events);

  b.detector.emplace("data", weighted_hist(data_x, toy.data.weights, cfg.edges));
  b.detector.emplace("noise", weighted_hist(first(toy.noise_mc.events), toy.noise_mc.weights, cfg.edges));
  b.detector.emplace("subtracted", weighted_hist(data_x, b.result.w_data, cfg.edges));
  b.detector.emplace("noiseless", weighted_hist(first(toy.signal_holdout.events), toy.signal_holdout.weights, cfg.edges));
  b.detector.emplace("sim", weighted_hist(sim_x, sim_unit, cfg.edges));
  b.detector.emplace("reweighted_sim", weighted_hist(sim_x, sim_w, cfg.edges));
  b.generator.emplace("prior", weighted_hist(prior_x, prior_w, cfg.edges));
  b.generator.emplace("truth", weighted_hist(first(toy.truth_holdout.events), toy.truth_holdout.weights, cfg.edges));
  b.generator.emplace("unfolded", weighted_hist(gen_x, b.result.weights_after(cfg.show_iteration), cfg.edges));
  b.generator.emplace("unfolded_next", weighted_hist(gen_x, b.result.weights_after(cfg.show_iteration + 1), cfg.edges));

  b.chi2_subtracted_vs_noiseless = chi2_per_bin(b.detector.at("subtracted"), b.detector.at("noiseless"));
  b.chi2_reweighted_vs_subtracted = chi2_per_bin(b.detector.at("reweighted_sim"), b.detector.at("subtracted"));
  b.chi2_unfolded_vs_truth = chi2_per_bin(b.generator.at("unfolded"), b.generator.at("truth"));
  b.l1_unfolded_vs_next =
      relative_l1(b.generator.at("unfolded").contents(), b.generator.at("unfolded_next").contents());
  return b;
}

/// Writes one CSV per level: bin_lo,bin_hi followed by one column per histogram (sorted by name).
inline void write_histogram_bundle(const std::string& path, const std::map<std::string, Histogram1D>& hists) {
  if (hists.empty()) throw UnfoldError("empty histogram bundle");
  const Histogram1D& ref = hists.begin()->second;
  auto out = csv::open_out(path);
  out << "bin_lo,bin_hi";
  for (const auto& [name, h] : hists) {
    if (!h.same_binning(ref)) throw UnfoldError("histogram bundle with mixed binning");
    out << ',' << name;
  }
  out << '\n';
  for (std::size_t i = 0; i < ref.n_bins(); ++i) {
    out << csv::format_number(ref.lo(i)) << ',' << csv::format_number(ref.hi(i));
    for (const auto& [name, h] : hists) out << ',' << csv::format_number(h.contents()[i]);
    out << '\n';
  }
  if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace unfoldkit
