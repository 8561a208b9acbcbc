#pragma once

#include <cerrno>
#include <climits>
#include <cstdlib>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"

namespace cflag {

// Dense supervised dataset: row-major features plus one integer class id
// (or regression target) per row.
struct Dataset {
  int feature_dim = 0;
  std::vector<double> features;
  std::vector<int> labels;

  Dataset() = default;
  explicit Dataset(int dim) : feature_dim(dim) {}

  int rows() const { return static_cast<int>(labels.size()); }
  bool empty() const { return labels.empty(); }

  std::span<const double> row(int i) const {
    return {features.data() + static_cast<std::size_t>(i) * feature_dim,
            static_cast<std::size_t>(feature_dim)};
  }

  void append_row(std::span<const double> x, int label) {
    if (static_cast<int>(x.size()) != feature_dim)
      throw ConfigError("row width does not match dataset feature_dim");
    features.insert(features.end(), x.begin(), x.end());
    labels.push_back(label);
  }

  void append_row(std::initializer_list<double> x, int label) {
    append_row(std::span<const double>(x.begin(), x.size()), label);
  }

  void append(const Dataset& other) {
    if (other.empty()) return;
    if (empty() && feature_dim == 0) feature_dim = other.feature_dim;
    if (other.feature_dim != feature_dim)
      throw ConfigError("cannot append datasets of different feature_dim");
    features.insert(features.end(), other.features.begin(), other.features.end());
    labels.insert(labels.end(), other.labels.begin(), other.labels.end());
  }

  Dataset select(const std::vector<int>& idx) const {
    Dataset out(feature_dim);
    out.features.reserve(idx.size() * feature_dim);
    out.labels.reserve(idx.size());
    for (int i : idx) out.append_row(row(i), labels[i]);
    return out;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

inline bool parse_double_strict(const std::string& tok, double& out) {
  if (tok.empty()) return false;
  const char* begin = tok.c_str();
  char* end = nullptr;
  out = std::strtod(begin, &end);
  return end == begin + tok.size() && std::isfinite(out);
}

inline bool parse_int_strict(const std::string& tok, int& out) {
  if (tok.empty()) return false;
  const char* begin = tok.c_str();
  char* end = nullptr;
  errno = 0;
  long v = std::strtol(begin, &end, 10);
  if (end != begin + tok.size() || errno == ERANGE) return false;
  if (v < INT_MIN || v > INT_MAX) return false;
  out = static_cast<int>(v);
  return true;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      out.push_back(trim(line.substr(start)));
      break;
    }
    out.push_back(trim(line.substr(start, comma - start)));
    start = comma + 1;
  }
  return out;
}

}  // namespace detail

// Numeric feature columns plus a trailing integer label column. A header row
// is optional and detected by a non-numeric first row. Values written with
// fmt_g17 round-trip bit-exactly.
inline Dataset read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  Dataset ds;
  std::string line;
  long lineno = 0;
  int columns = -1;
  bool saw_first_content = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    auto toks = detail::split_csv_line(line);
    if (!saw_first_content) {
      saw_first_content = true;
      bool numeric = true;
      double tmp;
      for (const auto& t : toks)
        if (!detail::parse_double_strict(t, tmp)) {
          numeric = false;
          break;
        }
      if (!numeric) {
        columns = static_cast<int>(toks.size());
        continue;  // header row
      }
    }
    if (columns < 0) columns = static_cast<int>(toks.size());
    if (static_cast<int>(toks.size()) != columns)
      throw ParseError("expected " + std::to_string(columns) + " columns, got " +
                           std::to_string(toks.size()),
                       lineno);
    if (columns < 2) throw ParseError("need at least one feature column and a label", lineno);
    if (ds.feature_dim == 0) ds.feature_dim = columns - 1;
    std::vector<double> x(ds.feature_dim);
    for (int i = 0; i < ds.feature_dim; ++i)
      if (!detail::parse_double_strict(toks[i], x[i]))
        throw ParseError("malformed feature value '" + toks[i] + "'", lineno);
    int label = 0;
    if (!detail::parse_int_strict(toks.back(), label))
      throw ParseError("malformed label '" + toks.back() + "'", lineno);
    ds.append_row(x, label);
  }
  if (ds.empty()) throw ParseError("no data rows in " + path);
  return ds;
}

inline void write_csv(const Dataset& ds, const std::string& path, bool header = false) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  if (header) {
    for (int i = 0; i < ds.feature_dim; ++i) out << "f" << i << ",";
    out << "label\n";
  }
  for (int r = 0; r < ds.rows(); ++r) {
    auto x = ds.row(r);
    for (int i = 0; i < ds.feature_dim; ++i) out << fmt_g17(x[i]) << ",";
    out << ds.labels[r] << "\n";
  }
  if (!out) throw DataError("write failed for " + path);
}

}  // namespace cflag
