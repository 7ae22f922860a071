#pragma once

// CSV event files.
//
//   flat:   event_id,weight,x0,...,x{d-1}
//   paired: event_id,weight,gen_present,g0,...,g{dg-1},sim_present,s0,...,s{ds-1}
//
// An absent side of a pair leaves its feature cells empty. Numbers use 17 significant digits.

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "unfoldkit/dataset.hpp"
#include "unfoldkit/errors.hpp"

namespace unfoldkit {

namespace csv {

inline std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

inline std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      cells.push_back(line.substr(start));
      return cells;
    }
    cells.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  return s;
}

inline double parse_double(std::string_view cell, const std::string& path, std::size_t line, std::string_view column) {
  cell = trim(cell);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (cell.empty() || ec != std::errc{} || ptr != cell.data() + cell.size())
    throw ParseError(path, line, "column '" + std::string(column) + "': cannot parse '" + std::string(cell) + "' as a number");
  if (!std::isfinite(v)) throw ParseError(path, line, "column '" + std::string(column) + "': non-finite value");
  return v;
}

inline std::size_t parse_index(std::string_view cell, const std::string& path, std::size_t line, std::string_view column) {
  cell = trim(cell);
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (cell.empty() || ec != std::errc{} || ptr != cell.data() + cell.size())
    throw ParseError(path, line, "column '" + std::string(column) + "': expected a non-negative integer, got '" +
                                     std::string(cell) + "'");
  return v;
}

inline bool parse_flag(std::string_view cell, const std::string& path, std::size_t line, std::string_view column) {
  cell = trim(cell);
  if (cell == "1") return true;
  if (cell == "0") return false;
  throw ParseError(path, line, "column '" + std::string(column) + "': expected 0 or 1, got '" + std::string(cell) + "'");
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  return out;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return in;
}

// Counts the trailing run of columns named prefix0, prefix1, ... starting at `first`.
inline std::size_t count_indexed(const std::vector<std::string_view>& header, std::size_t first, std::string_view prefix) {
  std::size_t n = 0;
  while (first + n < header.size() && trim(header[first + n]) == std::string(prefix) + std::to_string(n)) ++n;
  return n;
}

}  // namespace csv

inline void write_events(const std::string& path, const EventSet& set) {
  set.validate(path);
  auto out = csv::open_out(path);
  const std::size_t d = set.dimension();
  out << "event_id,weight";
  for (std::size_t i = 0; i < d; ++i) out << ",x" << i;
  out << '\n';
  for (std::size_t e = 0; e < set.size(); ++e) {
    out << e << ',' << csv::format_number(set.weights[e]);
    for (double v : set.events[e]) out << ',' << csv::format_number(v);
    out << '\n';
  }
  if (!out) throw IoError("write to '" + path + "' failed");
}

inline EventSet read_events(const std::string& path) {
  auto in = csv::open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path, 1, "missing header row");
  const auto header = csv::split(line);
  if (header.size() < 2 || csv::trim(header[0]) != "event_id" || csv::trim(header[1]) != "weight")
    throw ParseError(path, 1, "header must start with 'event_id,weight'");
  const std::size_t d = csv::count_indexed(header, 2, "x");
  if (2 + d != header.size()) throw ParseError(path, 1, "unexpected header column '" + std::string(header[2 + d]) + "'");

  EventSet set;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (csv::trim(line).empty()) continue;
    const auto cells = csv::split(line);
    if (cells.size() != header.size())
      throw ParseError(path, lineno, "expected " + std::to_string(header.size()) + " columns, found " + std::to_string(cells.size()));
    csv::parse_index(cells[0], path, lineno, "event_id");
    const double w = csv::parse_double(cells[1], path, lineno, "weight");
    FeatureVector x(d);
    for (std::size_t i = 0; i < d; ++i) x[i] = csv::parse_double(cells[2 + i], path, lineno, header[2 + i]);
    set.push_back(std::move(x), w);
  }
  return set;
}

inline void write_pairs(const std::string& path, const std::vector<PairedEvent>& pairs) {
  std::size_t dg = 0, ds = 0;
  for (const auto& p : pairs) {
    if (p.gen && dg == 0) dg = p.gen->size();
    if (p.sim && ds == 0) ds = p.sim->size();
  }
  auto out = csv::open_out(path);
  out << "event_id,weight,gen_present";
  for (std::size_t i = 0; i < dg; ++i) out << ",g" << i;
  out << ",sim_present";
  for (std::size_t i = 0; i < ds; ++i) out << ",s" << i;
  out << '\n';

  auto side = [&](const std::optional<FeatureVector>& v, std::size_t dim, std::size_t e, const char* name) {
    out << ',' << (v ? '1' : '0');
    if (v && v->size() != dim) throw UnfoldError(std::string(name) + " dimension mismatch at pair " + std::to_string(e));
    for (std::size_t i = 0; i < dim; ++i) {
      out << ',';
      if (v) {
        if (!std::isfinite((*v)[i])) throw UnfoldError("non-finite feature at pair " + std::to_string(e));
        out << csv::format_number((*v)[i]);
      }
    }
  };
  for (std::size_t e = 0; e < pairs.size(); ++e) {
    const auto& p = pairs[e];
    if (!p.gen && !p.sim) throw UnfoldError("pair " + std::to_string(e) + " has neither gen nor sim side");
    out << e << ',' << csv::format_number(p.weight);
    side(p.gen, dg, e, "gen");
    side(p.sim, ds, e, "sim");
    out << '\n';
  }
  if (!out) throw IoError("write to '" + path + "' failed");
}

inline std::vector<PairedEvent> read_pairs(const std::string& path) {
  auto in = csv::open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path, 1, "missing header row");
  const auto header = csv::split(line);
  if (header.size() < 4 || csv::trim(header[0]) != "event_id" || csv::trim(header[1]) != "weight" ||
      csv::trim(header[2]) != "gen_present")
    throw ParseError(path, 1, "header must start with 'event_id,weight,gen_present'");
  const std::size_t dg = csv::count_indexed(header, 3, "g");
  const std::size_t sim_flag = 3 + dg;
  if (sim_flag >= header.size() || csv::trim(header[sim_flag]) != "sim_present")
    throw ParseError(path, 1, "expected 'sim_present' after the gen feature columns");
  const std::size_t ds = csv::count_indexed(header, sim_flag + 1, "s");
  if (sim_flag + 1 + ds != header.size())
    throw ParseError(path, 1, "unexpected header column '" + std::string(header[sim_flag + 1 + ds]) + "'");

  auto read_side = [&](const std::vector<std::string_view>& cells, std::size_t flag_col, std::size_t dim,
                       std::size_t lineno) -> std::optional<FeatureVector> {
    const bool present = csv::parse_flag(cells[flag_col], path, lineno, header[flag_col]);
    if (!present) {
      for (std::size_t i = 0; i < dim; ++i)
        if (!csv::trim(cells[flag_col + 1 + i]).empty())
          throw ParseError(path, lineno, "column '" + std::string(header[flag_col + 1 + i]) + "' must be empty when " +
                                             std::string(header[flag_col]) + "=0");
      return std::nullopt;
    }
    FeatureVector x(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      const auto cell = csv::trim(cells[flag_col + 1 + i]);
      if (cell.empty())
        throw ParseError(path, lineno, "column '" + std::string(header[flag_col + 1 + i]) + "' is blank but " +
                                           std::string(header[flag_col]) + "=1");
      x[i] = csv::parse_double(cell, path, lineno, header[flag_col + 1 + i]);
    }
    return x;
  };

  std::vector<PairedEvent> pairs;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (csv::trim(line).empty()) continue;
    const auto cells = csv::split(line);
    if (cells.size() != header.size())
      throw ParseError(path, lineno, "expected " + std::to_string(header.size()) + " columns, found " + std::to_string(cells.size()));
    csv::parse_index(cells[0], path, lineno, "event_id");
    PairedEvent p;
    p.weight = csv::parse_double(cells[1], path, lineno, "weight");
    p.gen = read_side(cells, 2, dg, lineno);
    p.sim = read_side(cells, sim_flag, ds, lineno);
    if (!p.gen && !p.sim) throw ParseError(path, lineno, "pair has neither gen nor sim side");
    pairs.push_back(std::move(p));
  }
  return pairs;
}

}  // namespace unfoldkit
