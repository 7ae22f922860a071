#pragma once

// Binned baseline: response estimation and iterative Bayesian unfolding (Richardson-Lucy)
// with noise subtraction, acceptance and efficiency corrections.

#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "unfoldkit/dataset.hpp"
#include "unfoldkit/errors.hpp"
#include "unfoldkit/event_io.hpp"
#include "unfoldkit/histogram.hpp"

namespace unfoldkit {

/// P(sim bin j | gen bin i) estimated from synthetic pairs.
struct ResponseMatrix {
  std::vector<double> gen_edges;
  std::vector<double> sim_edges;
  /// n_sim x n_gen; every populated column sums to one.
  Eigen::MatrixXd matrix;
  /// Per sim bin: fraction of sim-level weight with a generator-level partner.
  std::vector<double> acceptance;
  /// Per gen bin: fraction of gen-level weight with an in-range sim-level partner.
  std::vector<double> efficiency;
  /// Gen bins without any both-present weight (zero columns).
  std::vector<std::size_t> empty_columns;

  std::size_t n_gen() const noexcept { return gen_edges.size() - 1; }
  std::size_t n_sim() const noexcept { return sim_edges.size() - 1; }
};

/// Uses the first feature of each side. Pairs whose present sides fall outside the binning
/// do not contribute to the matrix; a sim side outside the range counts as undetected.
inline ResponseMatrix estimate_response(const std::vector<PairedEvent>& pairs, const std::vector<double>& gen_edges,
                                        const std::vector<double>& sim_edges) {
  const Histogram1D gen_axis(gen_edges), sim_axis(sim_edges);
  ResponseMatrix r;
  r.gen_edges = gen_edges;
  r.sim_edges = sim_edges;
  const std::size_t ng = gen_axis.n_bins(), ns = sim_axis.n_bins();
  r.matrix = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(ns), static_cast<Eigen::Index>(ng));
  std::vector<double> eff_num(ng, 0.0), eff_den(ng, 0.0), acc_num(ns, 0.0), acc_den(ns, 0.0);

  for (const auto& p : pairs) {
    const auto gb = p.gen ? gen_axis.find_bin(p.gen->at(0)) : std::nullopt;
    const auto sb = p.sim ? sim_axis.find_bin(p.sim->at(0)) : std::nullopt;
    if (gb) {
      eff_den[*gb] += p.weight;
      if (sb) eff_num[*gb] += p.weight;
    }
    if (sb) {
      acc_den[*sb] += p.weight;
      if (gb) acc_num[*sb] += p.weight;
    }
    if (gb && sb) r.matrix(static_cast<Eigen::Index>(*sb), static_cast<Eigen::Index>(*gb)) += p.weight;
  }

  for (std::size_t i = 0; i < ng; ++i) {
    const double col = r.matrix.col(static_cast<Eigen::Index>(i)).sum();
    if (col > 0.0) {
      r.matrix.col(static_cast<Eigen::Index>(i)) /= col;
    } else {
      r.matrix.col(static_cast<Eigen::Index>(i)).setZero();
      r.empty_columns.push_back(i);
    }
  }
  r.efficiency.resize(ng);
  for (std::size_t i = 0; i < ng; ++i) r.efficiency[i] = eff_den[i] > 0.0 ? eff_num[i] / eff_den[i] : 0.0;
  // A sim bin without synthetic support carries no acceptance information; leave it uncorrected.
  r.acceptance.resize(ns);
  for (std::size_t j = 0; j < ns; ++j) r.acceptance[j] = acc_den[j] > 0.0 ? acc_num[j] / acc_den[j] : 1.0;
  return r;
}

/// sum_j [d_j ln(mu_j) - mu_j] with mu = R (efficiency * gen). Bins with d_j = 0 contribute
/// -mu_j; a bin with mu_j = 0 and d_j > 0 makes the result -infinity.
inline double poisson_loglik(const std::vector<double>& gen, const ResponseMatrix& r, const std::vector<double>& data) {
  if (gen.size() != r.n_gen() || data.size() != r.n_sim()) throw UnfoldError("poisson_loglik: binning mismatch");
  Eigen::VectorXd t(static_cast<Eigen::Index>(gen.size()));
  for (std::size_t i = 0; i < gen.size(); ++i) t(static_cast<Eigen::Index>(i)) = gen[i] * r.efficiency[i];
  const Eigen::VectorXd mu = r.matrix * t;
  double ll = 0.0;
  for (std::size_t j = 0; j < data.size(); ++j) {
    const double m = mu(static_cast<Eigen::Index>(j));
    if (data[j] > 0.0) {
      if (m <= 0.0) return -std::numeric_limits<double>::infinity();
      ll += data[j] * std::log(m);
    }
    ll -= m;
  }
  return ll;
}

struct IbuResult {
  std::vector<double> gen_edges;
  /// Efficiency-corrected gen-level estimate after each iteration (index k-1 for iteration k).
  std::vector<std::vector<double>> iterates;
  /// Log-likelihood of the prior (index 0) and of each iterate (index k).
  std::vector<double> log_likelihood;
  /// Detector-level input to the iteration: (data - noise) clipped at zero, times acceptance.
  std::vector<double> corrected_data;
  std::vector<std::string> warnings;

  Histogram1D histogram(std::size_t iteration) const {
    Histogram1D h(gen_edges);
    h.contents() = iterates.at(iteration - 1);
    for (std::size_t i = 0; i < h.n_bins(); ++i) h.sumw2()[i] = std::abs(h.contents()[i]);
    return h;
  }
};

/// Iterative Bayesian unfolding. The data are noise-subtracted (negative bins clipped to
/// zero), multiplied by the acceptance, and unfolded by the multiplicative EM update starting
/// from efficiency * prior; each iterate is then divided by the efficiency. Gen bins with zero
/// efficiency are excluded (kept at zero).
inline IbuResult ibu(const Histogram1D& data, const std::optional<Histogram1D>& noise, const ResponseMatrix& r,
                     const Histogram1D& prior, std::size_t n_iterations) {
  if (data.edges() != r.sim_edges) throw UnfoldError("ibu: data binning differs from the response sim binning");
  if (prior.edges() != r.gen_edges) throw UnfoldError("ibu: prior binning differs from the response gen binning");
  if (noise && noise->edges() != r.sim_edges) throw UnfoldError("ibu: noise binning differs from the response sim binning");
  const std::size_t ns = r.n_sim(), ng = r.n_gen();
  IbuResult out;
  out.gen_edges = r.gen_edges;

  out.corrected_data.resize(ns);
  bool clipped = false;
  for (std::size_t j = 0; j < ns; ++j) {
    double d = data.contents()[j] - (noise ? noise->contents()[j] : 0.0);
    if (d < 0.0) {
      d = 0.0;
      clipped = true;
    }
    out.corrected_data[j] = d * r.acceptance[j];
  }
  if (clipped) out.warnings.push_back("negative bins after noise subtraction were clipped to zero");

  Eigen::VectorXd t(static_cast<Eigen::Index>(ng));
  bool excluded = false;
  for (std::size_t i = 0; i < ng; ++i) {
    const bool supported = r.matrix.col(static_cast<Eigen::Index>(i)).sum() > 0.0;
    if (r.efficiency[i] <= 0.0) {
      t(static_cast<Eigen::Index>(i)) = 0.0;
      excluded = true;
      continue;
    }
    if (supported && !(prior.contents()[i] > 0.0))
      throw UnfoldError("ibu: prior must be strictly positive on supported gen bin " + std::to_string(i));
    t(static_cast<Eigen::Index>(i)) = prior.contents()[i] * r.efficiency[i];
  }
  if (excluded) out.warnings.push_back("gen bins with zero efficiency were excluded");

  const Eigen::Map<const Eigen::VectorXd> d(out.corrected_data.data(), static_cast<Eigen::Index>(ns));
  auto corrected = [&](const Eigen::VectorXd& folded_gen) {
    std::vector<double> g(ng, 0.0);
    for (std::size_t i = 0; i < ng; ++i)
      if (r.efficiency[i] > 0.0) g[i] = folded_gen(static_cast<Eigen::Index>(i)) / r.efficiency[i];
    return g;
  };
  out.log_likelihood.push_back(poisson_loglik(corrected(t), r, out.corrected_data));

  bool uncovered = false;
  for (std::size_t k = 0; k < n_iterations; ++k) {
    const Eigen::VectorXd mu = r.matrix * t;
    Eigen::VectorXd ratio(static_cast<Eigen::Index>(ns));
    for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(ns); ++j) {
      if (mu(j) > 0.0) {
        ratio(j) = d(j) / mu(j);
      } else {
        ratio(j) = 0.0;
        if (d(j) > 0.0) uncovered = true;
      }
    }
    t = t.cwiseProduct(r.matrix.transpose() * ratio);
    out.iterates.push_back(corrected(t));
    out.log_likelihood.push_back(poisson_loglik(out.iterates.back(), r, out.corrected_data));
  }
  if (uncovered) out.warnings.push_back("data in sim bins without response support were ignored");
  return out;
}

inline void write_histogram(const std::string& path, const Histogram1D& h) {
  auto out = csv::open_out(path);
  out << "bin_lo,bin_hi,content\n";
  for (std::size_t i = 0; i < h.n_bins(); ++i)
    out << csv::format_number(h.lo(i)) << ',' << csv::format_number(h.hi(i)) << ','
        << csv::format_number(h.contents()[i]) << '\n';
  if (!out) throw IoError("write to '" + path + "' failed");
}

/// Bin variances are set to |content| (Poisson).
inline Histogram1D read_histogram(const std::string& path) {
  auto in = csv::open_in(path);
  std::string line;
  if (!std::getline(in, line) || csv::trim(line) != "bin_lo,bin_hi,content")
    throw ParseError(path, 1, "header must be 'bin_lo,bin_hi,content'");
  std::vector<double> edges, contents;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (csv::trim(line).empty()) continue;
    const auto cells = csv::split(line);
    if (cells.size() != 3) throw ParseError(path, lineno, "expected 3 columns");
    const double lo = csv::parse_double(cells[0], path, lineno, "bin_lo");
    const double hi = csv::parse_double(cells[1], path, lineno, "bin_hi");
    if (edges.empty()) edges.push_back(lo);
    else if (lo != edges.back()) throw ParseError(path, lineno, "bins are not contiguous");
    edges.push_back(hi);
    contents.push_back(csv::parse_double(cells[2], path, lineno, "content"));
  }
  if (contents.empty()) throw ParseError(path, lineno, "no bins");
  Histogram1D h(edges);
  h.contents() = contents;
  for (std::size_t i = 0; i < contents.size(); ++i) h.sumw2()[i] = std::abs(contents[i]);
  return h;
}

/// Layout: header "sim_lo,sim_hi,acceptance,<g_lo>:<g_hi>,..."; one row per sim bin; a final
/// row "efficiency,,,<eff_0>,...".
inline void write_response(const std::string& path, const ResponseMatrix& r) {
  auto out = csv::open_out(path);
  out << "sim_lo,sim_hi,acceptance";
  for (std::size_t i = 0; i < r.n_gen(); ++i)
    out << ',' << csv::format_number(r.gen_edges[i]) << ':' << csv::format_number(r.gen_edges[i + 1]);
  out << '\n';
  for (std::size_t j = 0; j < r.n_sim(); ++j) {
    out << csv::format_number(r.sim_edges[j]) << ',' << csv::format_number(r.sim_edges[j + 1]) << ','
        << csv::format_number(r.acceptance[j]);
    for (std::size_t i = 0; i < r.n_gen(); ++i)
      out << ',' << csv::format_number(r.matrix(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)));
    out << '\n';
  }
  out << "efficiency,,";
  for (double e : r.efficiency) out << ',' << csv::format_number(e);
  out << '\n';
  if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace unfoldkit
