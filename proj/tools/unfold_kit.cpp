// unfold_kit: command-line driver for toy generation, unbinned and binned unfolding,
// ensemble benchmarks and binned-vs-unbinned comparisons.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "unfoldkit/binned.hpp"
#include "unfoldkit/dataset.hpp"
#include "unfoldkit/errors.hpp"
#include "unfoldkit/event_io.hpp"
#include "unfoldkit/experiments.hpp"
#include "unfoldkit/omnifold.hpp"
#include "unfoldkit/run_config.hpp"
#include "unfoldkit/stats.hpp"

namespace fs = std::filesystem;
using namespace unfoldkit;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kIo = 3, kAlgorithm = 4 };

struct Options {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  bool verbose = false;
};

struct Context {
  RunConfig cfg;
  fs::path out;
  std::size_t jobs = 1;
  bool verbose = false;

  void log(const std::string& msg) const {
    if (verbose) std::cerr << "[unfold_kit] " << msg << '\n';
  }
  std::string path(const std::string& name) const { return (out / name).string(); }
};

std::size_t jobs_from_env() {
  const char* v = std::getenv("UNFOLD_KIT_THREADS");
  if (!v || !*v) return 0;
  try {
    std::size_t pos = 0;
    const long long n = std::stoll(v, &pos);
    if (pos != std::string(v).size() || n < 1) throw std::invalid_argument("range");
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw ConfigError("UNFOLD_KIT_THREADS must be a positive integer, got '" + std::string(v) + "'");
  }
}

Context make_context(const Options& opt) {
  Context ctx;
  if (!opt.config.empty()) ctx.cfg = load_run_config(opt.config);
  if (opt.seed) ctx.cfg.set_seed(*opt.seed);
  if (opt.jobs && *opt.jobs == 0) throw ConfigError("--jobs must be >= 1");
  ctx.jobs = opt.jobs ? *opt.jobs : ctx.cfg.jobs ? ctx.cfg.jobs : std::max<std::size_t>(jobs_from_env(), 1);
  ctx.verbose = opt.verbose;
  check_inputs_exist(ctx.cfg.inputs);
  ctx.out = opt.out;
  std::error_code ec;
  fs::create_directories(ctx.out, ec);
  if (ec || !fs::is_directory(ctx.out)) throw IoError("cannot create output directory '" + opt.out + "'");
  return ctx;
}

void write_json(const std::string& path, const nlohmann::json& j) {
  auto out = csv::open_out(path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write to '" + path + "' failed");
}

void write_text(const std::string& path, const std::string& text) {
  auto out = csv::open_out(path);
  out << text;
  if (!out) throw IoError("write to '" + path + "' failed");
}

ToySample generate(const RunConfig& cfg) {
  return cfg.generator == Generator::gaussian_1d ? generate_gaussian_1d(cfg.toy)
                                                 : generate_gaussian_multidim(cfg.toy, cfg.n_observed_aux);
}

/// Event-level inputs: from files when configured, otherwise a freshly generated toy.
struct Inputs {
  EventSet data;
  EventSet noise;
  std::vector<PairedEvent> synthetic;
};

Inputs load_inputs(const Context& ctx) {
  const auto& in = ctx.cfg.inputs;
  Inputs out;
  if (in.data.empty() && in.synthetic.empty()) {
    ctx.log("no inputs configured; generating the toy sample");
    auto toy = generate(ctx.cfg);
    out.data = std::move(toy.data);
    out.noise = std::move(toy.noise_mc);
    out.synthetic = std::move(toy.synthetic);
    return out;
  }
  if (in.data.empty() || in.synthetic.empty())
    throw ConfigError("'inputs.data' and 'inputs.synthetic' must be given together");
  out.data = read_events(in.data);
  if (!in.noise.empty()) out.noise = read_events(in.noise);
  out.synthetic = read_pairs(in.synthetic);
  return out;
}

/// Detector-level histograms for the binned commands.
struct BinnedInputs {
  Histogram1D data;
  std::optional<Histogram1D> noise;
  std::vector<PairedEvent> synthetic;
  EventSet data_events;  // empty when the data came as a histogram
  EventSet noise_events;
};

Histogram1D first_feature_hist(const EventSet& s, const std::vector<double>& edges) {
  std::vector<double> x;
  x.reserve(s.size());
  for (const auto& e : s.events) x.push_back(e.at(0));
  return weighted_hist(x, s.weights, edges);
}

BinnedInputs load_binned_inputs(const Context& ctx) {
  const auto& in = ctx.cfg.inputs;
  BinnedInputs b;
  if (!in.data_hist.empty()) {
    if (in.synthetic.empty()) throw ConfigError("'inputs.data_hist' requires 'inputs.synthetic'");
    b.data = read_histogram(in.data_hist);
    if (!in.noise_hist.empty()) b.noise = read_histogram(in.noise_hist);
    b.synthetic = read_pairs(in.synthetic);
    return b;
  }
  Inputs ev = load_inputs(ctx);
  b.data = first_feature_hist(ev.data, ctx.cfg.sim_edges);
  if (!ev.noise.empty()) b.noise = first_feature_hist(ev.noise, ctx.cfg.sim_edges);
  b.synthetic = std::move(ev.synthetic);
  b.data_events = std::move(ev.data);
  b.noise_events = std::move(ev.noise);
  return b;
}

Histogram1D prior_hist(const std::vector<PairedEvent>& synthetic, const std::vector<double>& edges) {
  Histogram1D h(edges);
  for (const auto& p : synthetic)
    if (p.gen) h.fill(p.gen->at(0), p.weight);
  return h;
}

// ---------------------------------------------------------------------------------------

nlohmann::json cmd_generate(const Context& ctx) {
  const ToySample toy = generate(ctx.cfg);
  write_events(ctx.path("data.csv"), toy.data);
  write_events(ctx.path("noise.csv"), toy.noise_mc);
  write_pairs(ctx.path("synthetic.csv"), toy.synthetic);
  write_events(ctx.path("truth.csv"), toy.truth_holdout);
  write_events(ctx.path("signal.csv"), toy.signal_holdout);
  std::size_t background = 0;
  for (bool b : toy.data_is_background) background += b ? 1 : 0;
  const nlohmann::json summary{{"n_data", toy.data.size()},
                               {"n_background_in_data", background},
                               {"n_noise", toy.noise_mc.size()},
                               {"n_synthetic", toy.synthetic.size()},
                               {"n_truth", toy.truth_holdout.size()}};
  write_json(ctx.path("generate.json"), summary);
  return summary;
}

nlohmann::json cmd_unfold(const Context& ctx) {
  const Inputs in = load_inputs(ctx);
  ctx.log("unfolding " + std::to_string(in.data.size()) + " data events against " +
          std::to_string(in.synthetic.size()) + " synthetic pairs");
  const UnfoldResult r = run(in.data, in.noise, in.synthetic, ctx.cfg.unfold);
  write_weights_csv(ctx.path("weights.csv"), r);
  const auto diag = diagnostics_json(r);
  write_json(ctx.path("diagnostics.json"), diag);
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
  return {{"iterations", r.diagnostics.size()}, {"final_mean", finite_or_null(r.diagnostics.back().unfolded_mean)}};
}

nlohmann::json ibu_json(const IbuResult& r) {
  nlohmann::json ll = nlohmann::json::array();
  for (double v : r.log_likelihood) ll.push_back(finite_or_null(v));
  return {{"gen_edges", r.gen_edges},
          {"iterates", r.iterates},
          {"log_likelihood", ll},
          {"corrected_data", r.corrected_data},
          {"warnings", r.warnings}};
}

nlohmann::json cmd_ibu(const Context& ctx) {
  const BinnedInputs in = load_binned_inputs(ctx);
  const ResponseMatrix resp = estimate_response(in.synthetic, ctx.cfg.gen_edges, in.data.edges());
  const IbuResult r = ibu(in.data, in.noise, resp, prior_hist(in.synthetic, ctx.cfg.gen_edges), ctx.cfg.ibu_iterations);
  write_response(ctx.path("response.csv"), resp);
  write_histogram(ctx.path("unfolded.csv"), r.histogram(ctx.cfg.ibu_iterations));
  write_json(ctx.path("ibu.json"), ibu_json(r));
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
  return {{"iterations", r.iterates.size()}, {"final_log_likelihood", finite_or_null(r.log_likelihood.back())}};
}

nlohmann::json cmd_compare(const Context& ctx) {
  const BinnedInputs in = load_binned_inputs(ctx);
  const auto& cfg = ctx.cfg;
  const std::size_t k_max = cfg.ibu_iterations;
  const ResponseMatrix resp = estimate_response(in.synthetic, cfg.gen_edges, in.data.edges());
  const IbuResult ib = ibu(in.data, in.noise, resp, prior_hist(in.synthetic, cfg.gen_edges), k_max);

  UnfoldConfig ucfg = cfg.unfold;
  ucfg.n_iterations = k_max;
  ctx.log("binned loop with exact histogram ratios");
  const BinnedUnfoldResult bin = run_binned(in.data, in.noise, in.synthetic, cfg.gen_edges, ucfg);

  std::optional<UnfoldResult> neural;
  if (cfg.compare_neural) {
    if (in.data_events.empty()) throw ConfigError("'compare.neural' needs event-level data, not 'inputs.data_hist'");
    ctx.log("unbinned loop with neural classifiers");
    neural = run(in.data_events, in.noise_events, in.synthetic, ucfg);
  }

  nlohmann::json rows = nlohmann::json::array();
  bool exact_ok = true, neural_ok = true;
  for (std::size_t k = 1; k <= k_max; ++k) {
    const auto& ref = ib.iterates[k - 1];
    const double l1_exact = relative_l1(ref, bin.gen_histograms[k - 1].contents());
    exact_ok = exact_ok && l1_exact <= cfg.compare_exact_threshold;
    nlohmann::json row{{"iteration", k}, {"l1_binned_vs_ibu", l1_exact}};
    if (neural) {
      std::vector<double> gx;
      for (const auto& x : neural->sample.events) gx.push_back(x.at(0));
      const auto h = weighted_hist(gx, neural->weights_after(k), cfg.gen_edges);
      const double l1_neural = relative_l1(ref, h.contents());
      neural_ok = neural_ok && l1_neural <= cfg.compare_neural_threshold;
      row["l1_neural_vs_ibu"] = l1_neural;
      row["neural_histogram"] = h.contents();
    }
    row["ibu_histogram"] = ref;
    row["binned_histogram"] = bin.gen_histograms[k - 1].contents();
    rows.push_back(std::move(row));
  }
  nlohmann::json report{{"gen_edges", cfg.gen_edges},
                        {"sim_edges", in.data.edges()},
                        {"iterations", rows},
                        {"exact_threshold", cfg.compare_exact_threshold},
                        {"binned_within_threshold", exact_ok},
                        {"warnings", bin.warnings}};
  if (neural) {
    report["neural_threshold"] = cfg.compare_neural_threshold;
    report["neural_within_threshold"] = neural_ok;
  }
  write_json(ctx.path("compare.json"), report);
  return {{"binned_within_threshold", exact_ok}};
}

nlohmann::json cmd_benchmark(const Context& ctx) {
  EnsembleSpec spec = ctx.cfg.benchmark;
  spec.jobs = ctx.jobs;
  ctx.log("ensemble of " + std::to_string(spec.n_replicates) + " replicates x " +
          std::to_string(spec.feature_counts.size()) + " feature counts on " + std::to_string(spec.jobs) + " thread(s)");
  const EnsembleReport report = run_table1(spec, [&](std::size_t n, std::size_t r) {
    ctx.log("done N=" + std::to_string(n) + " replicate " + std::to_string(r));
  });
  write_json(ctx.path("report.json"), to_json(report));
  write_text(ctx.path("report.txt"), format_table(report));
  if (ctx.verbose) std::cerr << format_table(report);
  return {{"cells", report.cells.size()}};
}

int fail(ExitCode code, const char* kind, const std::string& msg) {
  std::cerr << nlohmann::json{{"error", kind}, {"exit_code", static_cast<int>(code)}, {"message", msg}}.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unfold_kit: iterative unbinned and binned unfolding on Gaussian toys"};
  app.require_subcommand(1);
  Options opt;
  app.add_option("--config", opt.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--out", opt.out, "Output directory")->capture_default_str();
  app.add_option("--seed", opt.seed, "Seed applied to every stochastic component");
  app.add_option("--jobs", opt.jobs, "Worker threads for benchmark (falls back to UNFOLD_KIT_THREADS)");
  app.add_flag("--verbose", opt.verbose, "Progress messages on stderr");
  app.fallthrough();

  using Command = nlohmann::json (*)(const Context&);
  std::vector<std::pair<CLI::App*, Command>> commands{
      {app.add_subcommand("generate", "Write the toy data, noise, synthetic and truth samples"), cmd_generate},
      {app.add_subcommand("unfold", "Unbinned unfolding; writes weights.csv and diagnostics.json"), cmd_unfold},
      {app.add_subcommand("ibu", "Binned iterative Bayesian unfolding"), cmd_ibu},
      {app.add_subcommand("benchmark", "Feature-count x iteration ensemble study"), cmd_benchmark},
      {app.add_subcommand("compare", "Exact binned loop and neural loop against IBU"), cmd_compare},
  };

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kConfig, "config", e.what());
  }

  try {
    const Context ctx = make_context(opt);
    for (const auto& [sub, command] : commands) {
      if (!sub->parsed()) continue;
      const auto summary = command(ctx);
      if (ctx.verbose) std::cerr << summary.dump() << '\n';
    }
    return kOk;
  } catch (const ConfigError& e) {
    return fail(kConfig, "config", e.what());
  } catch (const ParseError& e) {
    return fail(kIo, "io", e.what());
  } catch (const IoError& e) {
    return fail(kIo, "io", e.what());
  } catch (const TrainingError& e) {
    return fail(kAlgorithm, "algorithm", e.what());
  } catch (const UnfoldError& e) {
    return fail(kAlgorithm, "algorithm", e.what());
  } catch (const std::exception& e) {
    return fail(kOther, "internal", e.what());
  }
}
