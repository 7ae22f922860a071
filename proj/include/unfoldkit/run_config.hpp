#pragma once

// JSON run configuration shared by the command-line subcommands. Every block is optional;
// missing keys keep their defaults and unknown keys are rejected with their full path.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "unfoldkit/dataset.hpp"
#include "unfoldkit/errors.hpp"
#include "unfoldkit/experiments.hpp"
#include "unfoldkit/histogram.hpp"
#include "unfoldkit/nn.hpp"
#include "unfoldkit/omnifold.hpp"

namespace unfoldkit {

enum class Generator { gaussian_1d, gaussian_multidim };

struct InputPaths {
  std::string data;        // flat event CSV
  std::string noise;       // flat event CSV
  std::string synthetic;   // paired event CSV
  std::string data_hist;   // histogram CSV (ibu, compare)
  std::string noise_hist;  // histogram CSV (ibu, compare)
};

struct RunConfig {
  ToyConfig toy = figure1_toy();
  Generator generator = Generator::gaussian_1d;
  std::size_t n_observed_aux = 0;
  UnfoldConfig unfold;
  InputPaths inputs;
  std::vector<double> gen_edges = Histogram1D::uniform_edges(20, -3.0, 3.0);
  std::vector<double> sim_edges = Histogram1D::uniform_edges(20, -3.0, 3.0);
  std::size_t ibu_iterations = 3;
  /// compare: also run the neural unfolding and histogram it on gen_edges.
  bool compare_neural = true;
  double compare_exact_threshold = 1e-6;
  double compare_neural_threshold = 0.02;
  EnsembleSpec benchmark;
  std::size_t jobs = 0;  // 0: not set

  /// Applies a seed to every stochastic component.
  void set_seed(std::uint64_t seed) {
    toy.seed = seed;
    unfold.seed = seed;
    benchmark.base.seed = seed;
    benchmark.unfold.seed = seed;
  }
};

namespace detail {

template <typename T>
T get_as(const nlohmann::json& v, const std::string& path) {
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad value for '" + path + "': " + e.what());
  }
}

inline void require_object(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError("'" + path + "' must be an object");
}

[[noreturn]] inline void unknown_key(const std::string& path) {
  throw ConfigError("unknown configuration key '" + path + "'");
}

/// Either an explicit edge list or {"bins", "lo", "hi"}.
inline std::vector<double> parse_edges(const nlohmann::json& j, const std::string& path) {
  std::vector<double> edges;
  if (j.is_array()) {
    edges = get_as<std::vector<double>>(j, path);
  } else {
    require_object(j, path);
    std::size_t bins = 20;
    double lo = -3.0, hi = 3.0;
    for (const auto& [k, v] : j.items()) {
      if (k == "bins") bins = get_as<std::size_t>(v, path + ".bins");
      else if (k == "lo") lo = get_as<double>(v, path + ".lo");
      else if (k == "hi") hi = get_as<double>(v, path + ".hi");
      else unknown_key(path + "." + k);
    }
    if (bins == 0 || !(hi > lo)) throw ConfigError("'" + path + "' needs bins >= 1 and hi > lo");
    edges = Histogram1D::uniform_edges(bins, lo, hi);
  }
  try {
    Histogram1D check(edges);
  } catch (const std::exception& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
  return edges;
}

inline void merge_toy(const nlohmann::json& j, ToyConfig& c, const std::string& path) {
  require_object(j, path);
  for (const auto& [k, v] : j.items()) {
    const std::string p = path + "." + k;
    if (k == "truth_mean") c.truth_mean = get_as<double>(v, p);
    else if (k == "truth_width") c.truth_width = get_as<double>(v, p);
    else if (k == "prior_mean") c.prior_mean = get_as<double>(v, p);
    else if (k == "prior_width") c.prior_width = get_as<double>(v, p);
    else if (k == "smear_width") c.smear_width = get_as<double>(v, p);
    else if (k == "n_aux_smearings") c.n_aux_smearings = get_as<std::size_t>(v, p);
    else if (k == "noise_mean") c.noise_mean = get_as<double>(v, p);
    else if (k == "noise_width") c.noise_width = get_as<double>(v, p);
    else if (k == "noise_fraction") c.noise_fraction = get_as<double>(v, p);
    else if (k == "acceptance_loss") c.acceptance_loss = get_as<double>(v, p);
    else if (k == "efficiency_loss") c.efficiency_loss = get_as<double>(v, p);
    else if (k == "n_events") c.n_events = get_as<std::size_t>(v, p);
    else if (k == "seed") c.seed = get_as<std::uint64_t>(v, p);
    else unknown_key(p);
  }
}

inline void merge_unfold(const nlohmann::json& j, UnfoldConfig& c, const std::string& path) {
  require_object(j, path);
  // "network" applies to every role first; "networks.<role>" then overrides single roles.
  if (j.contains("network")) {
    nn::NetworkConfig n = c.step1;
    nn::merge_json(j.at("network"), n, path + ".network");
    c.set_all_networks(n);
  }
  for (const auto& [k, v] : j.items()) {
    const std::string p = path + "." + k;
    if (k == "network") continue;
    if (k == "n_iterations") c.n_iterations = get_as<std::size_t>(v, p);
    else if (k == "w_max") c.w_max = get_as<double>(v, p);
    else if (k == "enable_background") c.enable_background = get_as<bool>(v, p);
    else if (k == "enable_acceptance") c.enable_acceptance = get_as<bool>(v, p);
    else if (k == "enable_efficiency") c.enable_efficiency = get_as<bool>(v, p);
    else if (k == "warm_start") c.warm_start = get_as<bool>(v, p);
    else if (k == "seed") c.seed = get_as<std::uint64_t>(v, p);
    else if (k == "diagnostic_edges") c.diagnostic_edges = parse_edges(v, p);
    else if (k == "convention") {
      const auto s = get_as<std::string>(v, p);
      if (s == "multiplicative") c.convention = UpdateConvention::multiplicative;
      else if (s == "literal") c.convention = UpdateConvention::literal;
      else throw ConfigError("'" + p + "' must be \"multiplicative\" or \"literal\"");
    } else if (k == "miss_imputation") {
      const auto s = get_as<std::string>(v, p);
      if (s == "average") c.miss_imputation = MissImputation::average;
      else if (s == "unity") c.miss_imputation = MissImputation::unity;
      else throw ConfigError("'" + p + "' must be \"average\" or \"unity\"");
    } else if (k == "networks") {
      require_object(v, p);
      for (const auto& [role, nj] : v.items()) {
        nn::NetworkConfig* target = role == "background"   ? &c.background
                                    : role == "step1"      ? &c.step1
                                    : role == "miss_step1" ? &c.miss_step1
                                    : role == "step2"      ? &c.step2
                                    : role == "miss_step2" ? &c.miss_step2
                                                           : nullptr;
        if (!target) unknown_key(p + "." + role);
        nn::merge_json(nj, *target, p + "." + role);
      }
    } else {
      unknown_key(p);
    }
  }
}

inline void merge_benchmark(const nlohmann::json& j, EnsembleSpec& s, const std::string& path) {
  require_object(j, path);
  for (const auto& [k, v] : j.items()) {
    const std::string p = path + "." + k;
    if (k == "n_replicates") s.n_replicates = get_as<std::size_t>(v, p);
    else if (k == "full") {
      if (get_as<bool>(v, p)) s.n_replicates = 100;
    } else if (k == "checkpoints") s.checkpoints = get_as<std::vector<std::size_t>>(v, p);
    else if (k == "feature_counts") s.feature_counts = get_as<std::vector<std::size_t>>(v, p);
    else if (k == "toy") merge_toy(v, s.base, p);
    else if (k == "unfold") merge_unfold(v, s.unfold, p);
    else unknown_key(p);
  }
}

}  // namespace detail

/// Parses a configuration document. Relative input paths are resolved against `base_dir`.
inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  using detail::get_as;
  RunConfig c;
  detail::require_object(j, "<root>");
  auto resolve = [&](const nlohmann::json& v, const std::string& p) {
    std::filesystem::path path = get_as<std::string>(v, p);
    if (path.is_relative() && !base_dir.empty()) path = base_dir / path;
    return path.string();
  };
  // The seed is applied first so block-level seeds can still override it.
  if (j.contains("seed")) c.set_seed(get_as<std::uint64_t>(j.at("seed"), "seed"));
  for (const auto& [k, v] : j.items()) {
    if (k == "seed") continue;
    if (k == "toy") detail::merge_toy(v, c.toy, k);
    else if (k == "generator") {
      const auto s = get_as<std::string>(v, k);
      if (s == "gaussian_1d") c.generator = Generator::gaussian_1d;
      else if (s == "gaussian_multidim") c.generator = Generator::gaussian_multidim;
      else throw ConfigError("'generator' must be \"gaussian_1d\" or \"gaussian_multidim\"");
    } else if (k == "n_observed_aux") c.n_observed_aux = get_as<std::size_t>(v, k);
    else if (k == "unfold") detail::merge_unfold(v, c.unfold, k);
    else if (k == "inputs") {
      detail::require_object(v, k);
      for (const auto& [ik, iv] : v.items()) {
        const std::string p = "inputs." + ik;
        if (ik == "data") c.inputs.data = resolve(iv, p);
        else if (ik == "noise") c.inputs.noise = resolve(iv, p);
        else if (ik == "synthetic") c.inputs.synthetic = resolve(iv, p);
        else if (ik == "data_hist") c.inputs.data_hist = resolve(iv, p);
        else if (ik == "noise_hist") c.inputs.noise_hist = resolve(iv, p);
        else detail::unknown_key(p);
      }
    } else if (k == "binning") {
      detail::require_object(v, k);
      for (const auto& [bk, bv] : v.items()) {
        if (bk == "gen") c.gen_edges = detail::parse_edges(bv, "binning.gen");
        else if (bk == "sim") c.sim_edges = detail::parse_edges(bv, "binning.sim");
        else detail::unknown_key("binning." + bk);
      }
    } else if (k == "ibu") {
      detail::require_object(v, k);
      for (const auto& [ik, iv] : v.items()) {
        if (ik == "n_iterations") c.ibu_iterations = get_as<std::size_t>(iv, "ibu.n_iterations");
        else detail::unknown_key("ibu." + ik);
      }
    } else if (k == "compare") {
      detail::require_object(v, k);
      for (const auto& [ck, cv] : v.items()) {
        const std::string p = "compare." + ck;
        if (ck == "neural") c.compare_neural = get_as<bool>(cv, p);
        else if (ck == "exact_threshold") c.compare_exact_threshold = get_as<double>(cv, p);
        else if (ck == "neural_threshold") c.compare_neural_threshold = get_as<double>(cv, p);
        else detail::unknown_key(p);
      }
    } else if (k == "benchmark") detail::merge_benchmark(v, c.benchmark, k);
    else if (k == "jobs") c.jobs = get_as<std::size_t>(v, k);
    else detail::unknown_key(k);
  }

  c.toy.validate();
  c.unfold.validate();
  if (c.ibu_iterations == 0) throw ConfigError("'ibu.n_iterations' must be >= 1");
  if (c.generator == Generator::gaussian_multidim && c.n_observed_aux > c.toy.n_aux_smearings)
    throw ConfigError("'n_observed_aux' exceeds 'toy.n_aux_smearings'");
  c.benchmark.validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_run_config(j, std::filesystem::path(path).parent_path());
}

/// Checks that every configured input file exists.
inline void check_inputs_exist(const InputPaths& in) {
  for (const auto* p : {&in.data, &in.noise, &in.synthetic, &in.data_hist, &in.noise_hist})
    if (!p->empty() && !std::filesystem::is_regular_file(*p)) throw IoError("input file '" + *p + "' does not exist");
}

}  // namespace unfoldkit
