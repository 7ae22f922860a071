#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "unfoldkit/binned.hpp"
#include "unfoldkit/omnifold.hpp"

using namespace unfoldkit;

namespace {

UnfoldConfig clean_config(std::size_t iterations = 1) {
  UnfoldConfig c;
  c.n_iterations = iterations;
  c.enable_background = c.enable_acceptance = c.enable_efficiency = false;
  c.seed = 3;
  return c;
}

ToyConfig clean_toy(std::size_t n, std::uint64_t seed = 1) {
  ToyConfig t = figure1_toy();
  t.noise_fraction = t.acceptance_loss = t.efficiency_loss = 0.0;
  t.n_events = n;
  t.seed = seed;
  return t;
}

std::vector<double> central_grid(const std::vector<double>& sample, int n) {
  const double lo = oracle::quantile(sample, 0.05), hi = oracle::quantile(sample, 0.95);
  std::vector<double> g;
  for (int i = 0; i < n; ++i) g.push_back(lo + (hi - lo) * i / (n - 1));
  return g;
}

double evaluate_at(const FittedRatio& f, double x) {
  FeatureMatrix m(1, 1);
  m(0, 0) = x;
  return f(m)[0];
}

std::vector<double> sides(const std::vector<PairedEvent>& s, bool gen) {
  std::vector<double> v;
  for (const auto& p : s)
    if (gen ? p.gen.has_value() : p.sim.has_value()) v.push_back(gen ? p.gen->at(0) : p.sim->at(0));
  return v;
}

}  // namespace

TEST(UnfoldConfig, Validation) {
  UnfoldConfig c;
  EXPECT_NO_THROW(c.validate());
  c.n_iterations = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.w_max = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.step2.epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(SubtractBackground, ZeroNoiseWeightKeepsDataWeights) {
  const auto toy = generate_gaussian_1d(clean_toy(20000));
  EventSet noise;
  Rng rng(5);
  for (int i = 0; i < 2000; ++i) noise.push_back({rng.normal(0, 1.2)}, 0.0);
  UnfoldConfig cfg;
  NeuralRatioEstimator est(cfg);
  const auto w = subtract_background(est, toy.data, noise, cfg);
  const auto m = oracle::moments(w);
  EXPECT_NEAR(m.mean, 1.0, 0.05);
  EXPECT_GT(oracle::quantile(w, 0.05), 0.85);
}

TEST(SubtractBackground, MatchesAnalyticMixturePurity) {
  ToyConfig t = figure1_toy();
  t.acceptance_loss = t.efficiency_loss = 0.0;
  const auto toy = generate_gaussian_1d(t);
  UnfoldConfig cfg;
  NeuralRatioEstimator est(cfg);
  const auto w = subtract_background(est, toy.data, toy.noise_mc, cfg);
  double total = 0;
  for (double v : w) total += v;
  const double expected_total = static_cast<double>(toy.data.size()) - toy.noise_mc.total_weight();
  EXPECT_NEAR(total / expected_total, 1.0, 0.02);

  // Purity of the mixture 0.9 N(0.2, sqrt(0.8^2 + 0.5^2)) + 0.1 N(0, 1.2).
  const double s_sd = std::hypot(t.truth_width, t.smear_width);
  auto purity = [&](double x) {
    const double s = (1 - t.noise_fraction) * oracle::normal_pdf(x, t.truth_mean, s_sd);
    return s / (s + t.noise_fraction * oracle::normal_pdf(x, t.noise_mean, t.noise_width));
  };
  std::vector<double> xs;
  for (const auto& e : toy.data.events) xs.push_back(e[0]);
  // w_D is a deterministic function of x: evaluate it by nearest data point within a bin.
  const auto edges = Histogram1D::uniform_edges(12, oracle::quantile(xs, 0.05), oracle::quantile(xs, 0.95));
  const auto mean_w = oracle::binned_conditional_mean(xs, w, edges);
  for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
    const double c = 0.5 * (edges[b] + edges[b + 1]);
    EXPECT_NEAR(mean_w[b] / purity(c), 1.0, 0.10) << "x=" << c;
  }
}

TEST(SubtractBackground, Errors) {
  const auto toy = generate_gaussian_1d(clean_toy(100));
  UnfoldConfig cfg;
  NeuralRatioEstimator est(cfg);
  EXPECT_THROW(subtract_background(est, toy.data, EventSet{}, cfg), UnfoldError);
  EventSet heavy;
  heavy.push_back({0.0}, 1000.0);
  EXPECT_THROW(subtract_background(est, toy.data, heavy, cfg), UnfoldError);
  cfg.enable_background = false;
  EXPECT_EQ(subtract_background(est, toy.data, EventSet{}, cfg), toy.data.weights);
}

TEST(Step1, FixedPointGivesUnitRatio) {
  ToyConfig t = clean_toy(50000);
  t.truth_mean = t.prior_mean;
  t.truth_width = t.prior_width;
  const auto toy = generate_gaussian_1d(t);
  UnfoldConfig cfg = clean_config();
  NeuralRatioEstimator est(cfg);
  const std::vector<double> w(toy.synthetic.size(), 1.0);
  FittedRatio f;
  step1(est, toy.synthetic, w, toy.data, toy.data.weights, cfg, 1, &f);
  for (double x : central_grid(sides(toy.synthetic, false), 15)) EXPECT_NEAR(evaluate_at(f, x), 1.0, 0.10) << x;
}

TEST(Step1, MatchesSmearedGaussianRatio) {
  const ToyConfig t = clean_toy(100000);
  const auto toy = generate_gaussian_1d(t);
  UnfoldConfig cfg = clean_config();
  NeuralRatioEstimator est(cfg);
  const std::vector<double> w(toy.synthetic.size(), 1.0);
  FittedRatio f;
  const auto r = step1(est, toy.synthetic, w, toy.data, toy.data.weights, cfg, 1, &f);
  ASSERT_EQ(r.size(), toy.synthetic.size());
  const double sd_data = std::hypot(t.truth_width, t.smear_width), sd_sim = std::hypot(t.prior_width, t.smear_width);
  for (double x : central_grid(sides(toy.synthetic, false), 21)) {
    const double expected = oracle::normal_pdf(x, t.truth_mean, sd_data) / oracle::normal_pdf(x, t.prior_mean, sd_sim);
    EXPECT_NEAR(evaluate_at(f, x) / expected, 1.0, 0.10) << "x=" << x;
  }
}

TEST(Pull, WithoutEfficiencyLossIsBookkeeping) {
  const auto toy = generate_gaussian_1d(clean_toy(500));
  UnfoldConfig cfg = clean_config();
  cfg.enable_efficiency = true;
  HistogramRatioEstimator est({-3, 0, 3}, {-3, 0, 3});
  std::vector<double> w(toy.synthetic.size()), r(toy.synthetic.size());
  Rng rng(1);
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = 0.5 + rng.uniform();
    r[i] = 0.5 + rng.uniform();
  }
  const auto p = pull(est, toy.synthetic, r, w, cfg);
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_DOUBLE_EQ(p[i], w[i] * r[i]);
}

TEST(Pull, ConstantMultiplierIsImputed) {
  ToyConfig t = figure1_toy();
  t.n_events = 20000;
  const auto toy = generate_gaussian_1d(t);
  UnfoldConfig cfg;
  NeuralRatioEstimator est(cfg);
  std::vector<double> w(toy.synthetic.size(), 1.0), r(toy.synthetic.size(), 0.0);
  for (std::size_t i = 0; i < r.size(); ++i)
    if (toy.synthetic[i].sim) r[i] = 1.7;
  const auto p = pull(est, toy.synthetic, r, w, cfg);
  std::vector<double> imputed;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (!toy.synthetic[i].sim) imputed.push_back(p[i]);
  ASSERT_GT(imputed.size(), 1000u);
  EXPECT_NEAR(oracle::moments(imputed).mean, 1.7, 0.05);
  EXPECT_NEAR(oracle::quantile(imputed, 0.05), 1.7, 0.17);
  EXPECT_NEAR(oracle::quantile(imputed, 0.95), 1.7, 0.17);
}

TEST(Pull, ImputationTracksConditionalMean) {
  ToyConfig t = figure1_toy();
  t.noise_fraction = 0.0;
  const auto toy = generate_gaussian_1d(t);
  UnfoldConfig cfg;
  NeuralRatioEstimator est(cfg);
  Rng rng(7);
  std::vector<double> w(toy.synthetic.size(), 1.0), r(toy.synthetic.size(), 0.0);
  std::vector<double> xg, rv;
  for (std::size_t i = 0; i < r.size(); ++i) {
    const auto& p = toy.synthetic[i];
    if (!p.sim) continue;
    const double base = p.gen ? 1.0 + 0.5 * std::tanh(p.gen->at(0)) : 1.0;
    r[i] = base * (0.8 + 0.4 * rng.uniform());
    if (p.gen) {
      xg.push_back(p.gen->at(0));
      rv.push_back(r[i]);
    }
  }
  FittedRatio f;
  pull(est, toy.synthetic, r, w, cfg, 1, &f);
  ASSERT_TRUE(f.evaluate);
  const auto edges = Histogram1D::uniform_edges(10, oracle::quantile(xg, 0.05), oracle::quantile(xg, 0.95));
  const auto cm = oracle::binned_conditional_mean(xg, rv, edges);
  for (std::size_t b = 0; b < cm.size(); ++b) {
    const double c = 0.5 * (edges[b] + edges[b + 1]);
    EXPECT_NEAR(evaluate_at(f, c) / cm[b], 1.0, 0.10) << "x=" << c;
  }
}

TEST(Step2, GlobalScaleAndFixedPoint) {
  const auto toy = generate_gaussian_1d(clean_toy(30000));
  UnfoldConfig cfg = clean_config();
  NeuralRatioEstimator est(cfg);
  const std::vector<double> w(toy.synthetic.size(), 1.0), w2(toy.synthetic.size(), 2.0);
  const auto same = step2(est, toy.synthetic, w, w, cfg, 1);
  const auto twice = step2(est, toy.synthetic, w2, w, cfg, 2);
  EXPECT_NEAR(oracle::moments(same).mean, 1.0, 0.03);
  EXPECT_NEAR(oracle::quantile(same, 0.05), 1.0, 0.1);
  EXPECT_NEAR(oracle::quantile(same, 0.95), 1.0, 0.1);
  EXPECT_NEAR(oracle::moments(twice).mean, 2.0, 0.06);
  EXPECT_NEAR(oracle::quantile(twice, 0.05), 2.0, 0.2);
  EXPECT_NEAR(oracle::quantile(twice, 0.95), 2.0, 0.2);
}

TEST(Step2, RecoversConditionalMeanOfNoisyWeights) {
  const auto toy = generate_gaussian_1d(clean_toy(100000));
  UnfoldConfig cfg = clean_config();
  NeuralRatioEstimator est(cfg);
  Rng rng(8);
  const std::vector<double> w(toy.synthetic.size(), 1.0);
  std::vector<double> wp(toy.synthetic.size()), xg;
  for (std::size_t i = 0; i < wp.size(); ++i) {
    const double x = toy.synthetic[i].gen->at(0);
    wp[i] = std::exp(0.3 * x) * (0.5 + rng.uniform());
    xg.push_back(x);
  }
  const auto r2 = step2(est, toy.synthetic, wp, w, cfg);
  const auto edges = Histogram1D::uniform_edges(10, oracle::quantile(xg, 0.05), oracle::quantile(xg, 0.95));
  const auto cm = oracle::binned_conditional_mean(xg, wp, edges);
  const auto fit = oracle::binned_conditional_mean(xg, r2, edges);
  for (std::size_t b = 0; b < cm.size(); ++b) EXPECT_NEAR(fit[b] / cm[b], 1.0, 0.10) << "bin " << b;
}

TEST(Step2, WeightIsAFunctionOfGenFeatures) {
  // Duplicated gen points with different pull weights receive identical step-2 ratios.
  auto toy = generate_gaussian_1d(clean_toy(5000));
  const std::size_t n = toy.synthetic.size();
  for (std::size_t i = 0; i < n; ++i) toy.synthetic.push_back(toy.synthetic[i]);
  UnfoldConfig cfg = clean_config();
  cfg.step2.epochs = 3;
  NeuralRatioEstimator est(cfg);
  Rng rng(9);
  std::vector<double> w(2 * n, 1.0), wp(2 * n);
  for (auto& v : wp) v = 0.5 + rng.uniform();
  const auto r = step2(est, toy.synthetic, wp, w, cfg);
  for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(r[i], r[i + n]);
}

TEST(Push, ConstantMultiplierAndBookkeeping) {
  ToyConfig t = figure1_toy();
  t.n_events = 20000;
  const auto toy = generate_gaussian_1d(t);
  UnfoldConfig cfg;
  NeuralRatioEstimator est(cfg);
  std::vector<double> w(toy.synthetic.size(), 2.0), r(toy.synthetic.size(), 0.0);
  for (std::size_t i = 0; i < r.size(); ++i)
    if (toy.synthetic[i].gen) r[i] = 0.6;
  const auto p = push(est, toy.synthetic, r, w, cfg);
  std::vector<double> imputed;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (toy.synthetic[i].gen) {
      EXPECT_DOUBLE_EQ(p[i], 1.2);
    } else {
      imputed.push_back(p[i]);
    }
  }
  EXPECT_NEAR(oracle::moments(imputed).mean, 1.2, 0.04);

  cfg.miss_imputation = MissImputation::unity;
  const auto u = push(est, toy.synthetic, r, w, cfg);
  for (std::size_t i = 0; i < u.size(); ++i)
    if (!toy.synthetic[i].gen) { EXPECT_EQ(u[i], 2.0); }
}

TEST(Push, ImputationTracksConditionalMeanAtDetectorLevel) {
  ToyConfig t = figure1_toy();
  t.noise_fraction = 0.0;
  const auto toy = generate_gaussian_1d(t);
  UnfoldConfig cfg;
  NeuralRatioEstimator est(cfg);
  Rng rng(10);
  std::vector<double> w(toy.synthetic.size(), 1.0), r(toy.synthetic.size(), 0.0), xs, rv;
  for (std::size_t i = 0; i < r.size(); ++i) {
    const auto& p = toy.synthetic[i];
    if (!p.gen) continue;
    r[i] = (1.0 + 0.4 * p.gen->at(0) * p.gen->at(0) / (1 + p.gen->at(0) * p.gen->at(0))) * (0.9 + 0.2 * rng.uniform());
    if (p.sim) {
      xs.push_back(p.sim->at(0));
      rv.push_back(r[i]);
    }
  }
  FittedRatio f;
  push(est, toy.synthetic, r, w, cfg, 1, &f);
  ASSERT_TRUE(f.evaluate);
  const auto edges = Histogram1D::uniform_edges(10, oracle::quantile(xs, 0.05), oracle::quantile(xs, 0.95));
  const auto cm = oracle::binned_conditional_mean(xs, rv, edges);
  for (std::size_t b = 0; b < cm.size(); ++b) {
    const double c = 0.5 * (edges[b] + edges[b + 1]);
    EXPECT_NEAR(evaluate_at(f, c) / cm[b], 1.0, 0.10) << "x=" << c;
  }
}

TEST(Run, IdenticalLawsLeaveWeightsNearOne) {
  ToyConfig t = clean_toy(50000, 4);
  t.truth_mean = t.prior_mean;
  t.truth_width = t.prior_width;
  const auto toy = generate_gaussian_1d(t);
  const auto res = run(toy.data, toy.noise_mc, toy.synthetic, clean_config());
  const auto w = res.weights_after(1);
  EXPECT_NEAR(res.diagnostics[0].unfolded_mean, t.prior_mean, 0.02);
  EXPECT_GT(oracle::quantile(w, 0.01), 0.8);
  EXPECT_LT(oracle::quantile(w, 0.99), 1.25);
  for (double v : w) EXPECT_GE(v, 0.0);
}

TEST(Run, ResultShapeDeterminismAndLiteralFlag) {
  ToyConfig t = figure1_toy();
  t.n_events = 3000;
  const auto toy = generate_gaussian_1d(t);
  UnfoldConfig cfg;
  cfg.n_iterations = 2;
  nn::NetworkConfig small;
  small.hidden_layers = {8};
  small.epochs = 3;
  cfg.set_all_networks(small);
  const auto a = run(toy.data, toy.noise_mc, toy.synthetic, cfg);
  const auto b = run(toy.data, toy.noise_mc, toy.synthetic, cfg);
  ASSERT_EQ(a.snapshots.size(), 2u);
  ASSERT_EQ(a.diagnostics.size(), 2u);
  EXPECT_EQ(a.sample.weights, b.sample.weights);
  std::size_t gen_present = 0;
  for (const auto& p : toy.synthetic) gen_present += p.gen.has_value();
  EXPECT_EQ(a.sample.size(), gen_present);
  EXPECT_EQ(a.snapshots[1].w_synth, a.snapshots[0].w_push);
  for (const auto& s : a.snapshots)
    for (std::size_t i = 0; i < toy.synthetic.size(); ++i) {
      EXPECT_GE(s.w_push[i], 0.0);
      EXPECT_LE(s.w_push[i], cfg.w_max);
      if (!toy.synthetic[i].sim) { EXPECT_EQ(s.w_step1[i], 0.0); }
      if (!toy.synthetic[i].gen) { EXPECT_EQ(s.w_step2[i], 0.0); }
    }
  for (double w : a.w_data) {
    EXPECT_GE(w, 0.0);
    EXPECT_LE(w, 1.0);
  }
  const auto diag = diagnostics_json(a);
  EXPECT_EQ(diag.at("iterations").size(), 2u);
  EXPECT_TRUE(diag.at("iterations")[0].at("validation_loss").contains("step1"));

  cfg.convention = UpdateConvention::literal;
  cfg.n_iterations = 1;
  NeuralRatioEstimator est(cfg);
  const std::vector<double> w(toy.synthetic.size(), 3.0);
  const auto r1 = step1(est, toy.synthetic, w, toy.data, toy.data.weights, cfg);
  const auto lit = pull(est, toy.synthetic, r1, w, cfg);
  for (std::size_t i = 0; i < w.size(); ++i)
    if (toy.synthetic[i].sim) { EXPECT_DOUBLE_EQ(lit[i], std::min(r1[i], cfg.w_max)); }
}

TEST(Run, WeightCapIsApplied) {
  ToyConfig t = clean_toy(2000);
  const auto toy = generate_gaussian_1d(t);
  UnfoldConfig cfg = clean_config();
  cfg.w_max = 1.05;
  HistogramRatioEstimator est(Histogram1D::uniform_edges(10, -3, 3), Histogram1D::uniform_edges(10, -3, 3));
  const auto res = run_with(est, toy.data, toy.noise_mc, toy.synthetic, cfg);
  for (double w : res.sample.weights) EXPECT_LE(w, 1.05);
}

TEST(Run, ErrorsCarryIterationIndex) {
  const auto toy = generate_gaussian_1d(clean_toy(200));
  auto synthetic = toy.synthetic;
  for (auto& p : synthetic) p.sim = FeatureVector{0.1, 0.2};  // sim dimension 2 vs data dimension 1
  try {
    run(toy.data, toy.noise_mc, synthetic, clean_config());
    FAIL();
  } catch (const UnfoldError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(run(toy.data, toy.noise_mc, {}, clean_config()), UnfoldError);
}

TEST(RunBinned, MatchesIbuAtEveryIteration) {
  const auto toy = generate_gaussian_1d(clean_toy(100000, 5));
  const auto edges = Histogram1D::uniform_edges(20, -3, 3);
  Histogram1D data(edges), prior(edges);
  for (const auto& x : toy.data.events) data.fill(x[0]);
  for (const auto& p : toy.synthetic) prior.fill(p.gen->at(0));
  const auto ib = ibu(data, std::nullopt, estimate_response(toy.synthetic, edges, edges), prior, 3);
  UnfoldConfig cfg;
  cfg.n_iterations = 3;
  cfg.enable_background = false;
  const auto bin = run_binned(data, std::nullopt, toy.synthetic, edges, cfg);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_LT(relative_l1(ib.iterates[k], bin.gen_histograms[k].contents()), 1e-6);
}

TEST(RunBinned, IdentityResponseReproducesData) {
  std::vector<PairedEvent> synthetic;
  Rng rng(3);
  for (int i = 0; i < 5000; ++i) {
    const double x = rng.uniform() * 4;
    synthetic.push_back({FeatureVector{x}, FeatureVector{x}, 1.0});
  }
  const auto edges = Histogram1D::uniform_edges(4, 0, 4);
  Histogram1D data(edges);
  data.contents() = {10, 40, 30, 20};
  const auto bin = run_binned(data, std::nullopt, synthetic, edges, clean_config());
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(bin.gen_histograms[0].contents()[i], data.contents()[i], 1e-9);
}

TEST(RunBinned, EmptyDenominatorWarns) {
  std::vector<PairedEvent> synthetic{{FeatureVector{0.5}, FeatureVector{0.5}, 1.0}};
  const auto edges = Histogram1D::uniform_edges(2, 0, 2);
  Histogram1D data(edges);
  data.contents() = {5, 5};
  const auto bin = run_binned(data, std::nullopt, synthetic, edges, clean_config());
  EXPECT_FALSE(bin.warnings.empty());
}

TEST(WeightsCsv, HeaderAndRows) {
  const auto toy = generate_gaussian_1d(clean_toy(300));
  HistogramRatioEstimator est(Histogram1D::uniform_edges(5, -3, 3), Histogram1D::uniform_edges(5, -3, 3));
  const auto res = run_with(est, toy.data, toy.noise_mc, toy.synthetic, clean_config(2));
  const auto dir = oracle::fresh_dir("weights_csv");
  write_weights_csv((dir / "w.csv").string(), res);
  std::ifstream in(dir / "w.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "event_id,w_iter1,w_iter2");
  std::size_t rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  EXPECT_EQ(rows, res.event_ids.size());
  std::filesystem::remove_all(dir);
}
