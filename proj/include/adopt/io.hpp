// Data ingestion with schema validation, configuration, and report emission.
// CSV schemas are fixed: header row required, UTF-8, comma separators,
// '.' decimal marks. Doubles are written with round-trip precision.
#pragma once

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "adopt/choice.hpp"
#include "adopt/common.hpp"
#include "adopt/diffusion.hpp"
#include "adopt/factor.hpp"

namespace adopt::io {

using nlohmann::json;

// ---------------------------------------------------------------------------
// CSV primitives
// ---------------------------------------------------------------------------

struct CsvTable {
  std::string path;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;  // row r corresponds to line r+2

  int column(const std::string& name) const {
    for (std::size_t c = 0; c < header.size(); ++c)
      if (header[c] == name) return static_cast<int>(c);
    throw DataError(path + ": missing column '" + name + "'");
  }
};

inline CsvTable read_csv(const std::string& path, const std::vector<std::string>& expected_header) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open file");
  CsvTable table;
  table.path = path;
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::stringstream hs(line);
  std::string cell;
  while (std::getline(hs, cell, ',')) table.header.push_back(cell);
  if (!expected_header.empty() && table.header != expected_header) {
    std::string want;
    for (const auto& h : expected_header) want += (want.empty() ? "" : ",") + h;
    throw DataError(path + ":1: header mismatch, expected '" + want + "'");
  }
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> row;
    std::stringstream ls(line);
    std::string field;
    while (std::getline(ls, field, ',')) row.push_back(field);
    if (line.back() == ',') row.push_back("");
    if (row.size() != table.header.size())
      throw DataError(path + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(table.header.size()) + " fields, got " +
                      std::to_string(row.size()));
    table.rows.push_back(std::move(row));
  }
  return table;
}

inline double parse_double(const CsvTable& t, std::size_t row, int col) {
  const std::string& s = t.rows[row][col];
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(t.path + ":" + std::to_string(row + 2) + ": column '" + t.header[col] +
                    "': cannot parse '" + s + "' as a number");
  }
}

inline long parse_int(const CsvTable& t, std::size_t row, int col) {
  const std::string& s = t.rows[row][col];
  try {
    std::size_t used = 0;
    const long v = std::stol(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(t.path + ":" + std::to_string(row + 2) + ": column '" + t.header[col] +
                    "': cannot parse '" + s + "' as an integer");
  }
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Bundle
// ---------------------------------------------------------------------------

struct BundlePaths {
  std::string adoption_local;
  std::string adoption_global;
  std::string features;
  std::string choices;
  std::string customers;
  std::string popularity;

  static BundlePaths in_directory(const std::string& dir) {
    const auto join = [&](const char* name) {
      return (std::filesystem::path(dir) / name).string();
    };
    return {join("adoption_local.csv"), join("adoption_global.csv"), join("features.csv"),
            join("choices.csv"),        join("customers.csv"),       join("popularity.csv")};
  }
};

struct DatasetBundle {
  diffusion::AdoptionSeries adoption_local;
  diffusion::AdoptionSeries adoption_global;
  factor::FeaturePanel features;
  choice::Panel panel;
  VectorXd popularity;  // per category
};

inline const std::vector<std::string>& adoption_header() {
  static const std::vector<std::string> h{"category_id", "day", "cumulative_adopters"};
  return h;
}
inline const std::vector<std::string>& features_header() {
  static const std::vector<std::string> h{
      "category_id", "week",   "avg_file_size", "featured_rate",   "avg_price", "var_price",
      "n_paid",      "n_free", "free_paid_ratio", "avg_tenure", "n_total"};
  return h;
}
inline const std::vector<std::string>& choices_header() {
  static const std::vector<std::string> h{"customer_id", "week", "choice"};
  return h;
}
inline const std::vector<std::string>& customers_header() {
  static const std::vector<std::string> h{"customer_id", "tenure_days"};
  return h;
}
inline const std::vector<std::string>& popularity_header() {
  static const std::vector<std::string> h{"category_id", "popularity"};
  return h;
}

namespace detail {

/// Parse an adoption table into a J x T matrix. Category ids must be 1..J and
/// days contiguous from 0 within each category.
inline diffusion::AdoptionSeries parse_adoption(const CsvTable& t, bool monotonize,
                                                std::ostream& log) {
  const int c_cat = t.column("category_id");
  const int c_day = t.column("day");
  const int c_val = t.column("cumulative_adopters");
  if (t.rows.empty()) throw DataError(t.path + ": no data rows");
  std::map<long, std::vector<std::pair<long, double>>> by_cat;
  for (std::size_t r = 0; r < t.rows.size(); ++r)
    by_cat[parse_int(t, r, c_cat)].emplace_back(parse_int(t, r, c_day), parse_double(t, r, c_val));
  const auto j_count = static_cast<Eigen::Index>(by_cat.size());
  Eigen::Index days = -1;
  diffusion::AdoptionSeries out;
  Eigen::Index expected_id = 1;
  for (auto& [cat, series] : by_cat) {
    if (cat != expected_id)
      throw DataError(t.path + ": category ids must be contiguous from 1; found " +
                      std::to_string(cat) + " where " + std::to_string(expected_id) +
                      " was expected");
    ++expected_id;
    if (days < 0) {
      days = static_cast<Eigen::Index>(series.size());
      out.y = MatrixXd(j_count, days);
    } else if (static_cast<Eigen::Index>(series.size()) != days) {
      throw DataError(t.path + ": category " + std::to_string(cat) + " has " +
                      std::to_string(series.size()) + " days, expected " + std::to_string(days));
    }
    for (std::size_t d = 0; d < series.size(); ++d) {
      if (series[d].first != static_cast<long>(d))
        throw DataError(t.path + ": category " + std::to_string(cat) + ": day " +
                        std::to_string(series[d].first) + " follows day " +
                        std::to_string(d == 0 ? -1 : series[d - 1].first) +
                        "; days must be contiguous from 0");
      out.y(cat - 1, static_cast<Eigen::Index>(d)) = series[d].second;
    }
    for (Eigen::Index d = 1; d < days; ++d) {
      if (out.y(cat - 1, d) < out.y(cat - 1, d - 1)) {
        if (!monotonize)
          throw DataError(t.path + ": category " + std::to_string(cat) +
                          ": cumulative series decreases at day " + std::to_string(d));
        log << "warning: " << t.path << ": category " << cat
            << ": non-monotone cumulative series at day " << d << "; monotonized\n";
        out.y(cat - 1, d) = out.y(cat - 1, d - 1);
      }
    }
  }
  return out;
}

}  // namespace detail

struct LoadOptions {
  bool monotonize = true;
  std::ostream* log = &std::cerr;
};

/// Load and cross-validate all bundle files. Referential integrity is fatal;
/// non-monotone cumulative series are monotonized with a warning when allowed.
inline DatasetBundle load_bundle(const BundlePaths& paths, const LoadOptions& opt = {}) {
  DatasetBundle bundle;
  std::ostream& log = *opt.log;
  bundle.adoption_local =
      detail::parse_adoption(read_csv(paths.adoption_local, adoption_header()), opt.monotonize, log);
  bundle.adoption_global =
      detail::parse_adoption(read_csv(paths.adoption_global, adoption_header()), opt.monotonize, log);
  const auto j_count = bundle.adoption_local.categories();
  if (bundle.adoption_global.categories() != j_count)
    throw DataError(paths.adoption_global + ": category count differs from the local series");

  // Features.
  {
    const CsvTable t = read_csv(paths.features, features_header());
    if (t.rows.empty()) throw DataError(t.path + ": no data rows");
    const int c_cat = t.column("category_id");
    const int c_week = t.column("week");
    std::map<std::pair<long, long>, std::size_t> seen;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      const long cat = parse_int(t, r, c_cat);
      if (cat < 1 || cat > j_count)
        throw DataError(t.path + ":" + std::to_string(r + 2) + ": unknown category id " +
                        std::to_string(cat));
      const long week = parse_int(t, r, c_week);
      if (!seen.emplace(std::make_pair(cat, week), r).second)
        throw DataError(t.path + ":" + std::to_string(r + 2) + ": duplicate (category, week)");
    }
    const long weeks = static_cast<long>(t.rows.size()) / j_count;
    if (static_cast<long>(t.rows.size()) != weeks * j_count)
      throw DataError(t.path + ": rows do not form a complete category x week grid");
    bundle.features.values = MatrixXd(t.rows.size(), factor::FeaturePanel::kColumns);
    bundle.features.category.resize(t.rows.size());
    bundle.features.week.resize(t.rows.size());
    for (long cat = 1; cat <= j_count; ++cat)
      for (long week = 0; week < weeks; ++week) {
        const auto it = seen.find({cat, week});
        if (it == seen.end())
          throw DataError(t.path + ": missing row for category " + std::to_string(cat) +
                          ", week " + std::to_string(week) + "; weeks must be contiguous from 0");
        const std::size_t r = it->second;
        const std::size_t out_row = (cat - 1) * weeks + week;
        bundle.features.category[out_row] = static_cast<int>(cat);
        bundle.features.week[out_row] = static_cast<int>(week);
        for (int c = 0; c < factor::FeaturePanel::kColumns; ++c)
          bundle.features.values(out_row, c) =
              parse_double(t, r, t.column(factor::FeaturePanel::column_names()[c]));
        const double n_paid = bundle.features.values(out_row, 4);
        const double n_free = bundle.features.values(out_row, 5);
        const double n_total = bundle.features.values(out_row, 8);
        if (n_paid < 0 || n_free < 0 || n_total < 0 || bundle.features.values(out_row, 3) < 0.0)
          throw DataError(t.path + ":" + std::to_string(r + 2) +
                          ": counts and price variance must be non-negative");
        if (n_total != n_paid + n_free)
          throw DataError(t.path + ":" + std::to_string(r + 2) +
                          ": n_total must equal n_paid + n_free");
      }
  }

  // Customers, then choices against them.
  std::map<long, double> tenure_by_id;
  {
    const CsvTable t = read_csv(paths.customers, customers_header());
    if (t.rows.empty()) throw DataError(t.path + ": no data rows");
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      const long id = parse_int(t, r, 0);
      if (!tenure_by_id.emplace(id, parse_double(t, r, 1)).second)
        throw DataError(t.path + ":" + std::to_string(r + 2) + ": duplicate customer id " +
                        std::to_string(id));
    }
  }
  {
    const CsvTable t = read_csv(paths.choices, choices_header());
    if (t.rows.empty()) throw DataError(t.path + ": no data rows");
    std::map<long, std::vector<std::pair<long, long>>> by_cust;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      const long id = parse_int(t, r, 0);
      if (!tenure_by_id.count(id))
        throw DataError(t.path + ":" + std::to_string(r + 2) + ": unknown customer id " +
                        std::to_string(id));
      const long choice_id = parse_int(t, r, 2);
      if (choice_id < 0 || choice_id > j_count)
        throw DataError(t.path + ":" + std::to_string(r + 2) + ": choice " +
                        std::to_string(choice_id) + " outside 0.." + std::to_string(j_count));
      by_cust[id].emplace_back(parse_int(t, r, 1), choice_id);
    }
    long weeks = -1;
    bundle.panel.j_count = static_cast<int>(j_count);
    bundle.panel.tenure = VectorXd(static_cast<Eigen::Index>(by_cust.size()));
    Eigen::Index i = 0;
    for (auto& [id, rows] : by_cust) {
      if (weeks < 0) weeks = static_cast<long>(rows.size());
      if (static_cast<long>(rows.size()) != weeks)
        throw DataError(t.path + ": customer " + std::to_string(id) + " has " +
                        std::to_string(rows.size()) + " weeks, expected " + std::to_string(weeks));
      std::vector<int> series(rows.size());
      for (std::size_t w = 0; w < rows.size(); ++w) {
        if (rows[w].first != static_cast<long>(w))
          throw DataError(t.path + ": customer " + std::to_string(id) +
                          ": weeks must be contiguous from 0; found week " +
                          std::to_string(rows[w].first) + " in position " + std::to_string(w));
        series[w] = static_cast<int>(rows[w].second);
      }
      bundle.panel.choices.push_back(std::move(series));
      bundle.panel.tenure[i++] = tenure_by_id[id];
    }
  }

  // Popularity.
  {
    const CsvTable t = read_csv(paths.popularity, popularity_header());
    bundle.popularity = VectorXd::Zero(j_count);
    VectorXi seen = VectorXi::Zero(j_count);
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      const long cat = parse_int(t, r, 0);
      if (cat < 1 || cat > j_count)
        throw DataError(t.path + ":" + std::to_string(r + 2) + ": unknown category id " +
                        std::to_string(cat));
      bundle.popularity[cat - 1] = parse_double(t, r, 1);
      seen[cat - 1] = 1;
    }
    if (seen.sum() != j_count) throw DataError(t.path + ": popularity missing for some category");
  }

  bundle.panel.validate();
  return bundle;
}

// ---------------------------------------------------------------------------
// Writers
// ---------------------------------------------------------------------------

inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path + ": cannot open for writing");
  for (const auto& l : lines) out << l << "\n";
  if (!out) throw DataError(path + ": write failed");
}

inline void write_adoption_csv(const std::string& path, const diffusion::AdoptionSeries& series) {
  std::vector<std::string> lines{"category_id,day,cumulative_adopters"};
  for (Eigen::Index j = 0; j < series.categories(); ++j)
    for (Eigen::Index d = 0; d < series.days(); ++d)
      lines.push_back(std::to_string(j + 1) + "," + std::to_string(d) + "," +
                      format_double(series.y(j, d)));
  write_lines(path, lines);
}

inline void write_features_csv(const std::string& path, const factor::FeaturePanel& panel) {
  std::vector<std::string> lines{
      "category_id,week,avg_file_size,featured_rate,avg_price,var_price,n_paid,n_free,"
      "free_paid_ratio,avg_tenure,n_total"};
  for (Eigen::Index r = 0; r < panel.values.rows(); ++r) {
    std::string line =
        std::to_string(panel.category[r]) + "," + std::to_string(panel.week[r]);
    for (int c = 0; c < factor::FeaturePanel::kColumns; ++c)
      line += "," + format_double(panel.values(r, c));
    lines.push_back(std::move(line));
  }
  write_lines(path, lines);
}

inline void write_choices_csv(const std::string& path, const choice::Panel& panel) {
  std::vector<std::string> lines{"customer_id,week,choice"};
  for (int i = 0; i < panel.customers(); ++i)
    for (int t = 0; t < panel.weeks(); ++t)
      lines.push_back(std::to_string(i + 1) + "," + std::to_string(t) + "," +
                      std::to_string(panel.choices[i][t]));
  write_lines(path, lines);
}

inline void write_customers_csv(const std::string& path, const choice::Panel& panel) {
  std::vector<std::string> lines{"customer_id,tenure_days"};
  for (int i = 0; i < panel.customers(); ++i)
    lines.push_back(std::to_string(i + 1) + "," + format_double(panel.tenure[i]));
  write_lines(path, lines);
}

inline void write_popularity_csv(const std::string& path, const VectorXd& popularity) {
  std::vector<std::string> lines{"category_id,popularity"};
  for (Eigen::Index j = 0; j < popularity.size(); ++j)
    lines.push_back(std::to_string(j + 1) + "," + format_double(popularity[j]));
  write_lines(path, lines);
}

inline void write_bundle(const BundlePaths& paths, const DatasetBundle& bundle) {
  write_adoption_csv(paths.adoption_local, bundle.adoption_local);
  write_adoption_csv(paths.adoption_global, bundle.adoption_global);
  write_features_csv(paths.features, bundle.features);
  write_choices_csv(paths.choices, bundle.panel);
  write_customers_csv(paths.customers, bundle.panel);
  write_popularity_csv(paths.popularity, bundle.popularity);
}

/// Write a generic matrix as CSV with the given row/column labels; columns
/// default to t0..tN-1.
inline void write_matrix_csv(const std::string& path, const MatrixXd& m,
                             const std::string& row_label,
                             const std::vector<std::string>& col_names = {}) {
  std::string header = row_label;
  if (col_names.empty()) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) header += ",t" + std::to_string(c);
  } else {
    for (const auto& c : col_names) header += "," + c;
  }
  std::vector<std::string> lines{header};
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::string line = std::to_string(r + 1);
    for (Eigen::Index c = 0; c < m.cols(); ++c) line += "," + format_double(m(r, c));
    lines.push_back(std::move(line));
  }
  write_lines(path, lines);
}

// ---------------------------------------------------------------------------
// Weekly aggregation
// ---------------------------------------------------------------------------

/// Within-week mean of a daily J x T_days matrix; the trailing partial week
/// is dropped. Applied exactly once, here, for all weekly covariates.
inline MatrixXd weekly_mean(const MatrixXd& daily, int weeks = 0) {
  const Eigen::Index full_weeks = daily.cols() / 7;
  const Eigen::Index take = weeks > 0 ? std::min<Eigen::Index>(weeks, full_weeks) : full_weeks;
  if (take < 1) throw DegenerateInputError("need at least 7 days for weekly aggregation");
  MatrixXd out(daily.rows(), take);
  for (Eigen::Index w = 0; w < take; ++w)
    out.col(w) = daily.middleCols(7 * w, 7).rowwise().mean();
  return out;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Posterior summary of a draw sequence. Percentiles use linear interpolation
/// between order statistics: h = (n-1)p, interpolate x[floor(h)], x[floor(h)+1].
struct DrawSummary {
  double mean = 0.0;
  double sd = 0.0;
  double p2_5 = 0.0;
  double p97_5 = 0.0;
};

inline DrawSummary summarize_draws(std::vector<double> draws) {
  if (draws.empty()) throw UsageError("cannot summarize zero draws");
  DrawSummary s;
  const double n = static_cast<double>(draws.size());
  for (double v : draws) s.mean += v;
  s.mean /= n;
  for (double v : draws) s.sd += (v - s.mean) * (v - s.mean);
  s.sd = draws.size() > 1 ? std::sqrt(s.sd / (n - 1.0)) : 0.0;
  std::sort(draws.begin(), draws.end());
  s.p2_5 = quantile_sorted(draws, 0.025);
  s.p97_5 = quantile_sorted(draws, 0.975);
  return s;
}

inline json summary_json(const DrawSummary& s) {
  return json{{"mean", s.mean}, {"sd", s.sd}, {"p2_5", s.p2_5}, {"p97_5", s.p97_5}};
}

/// Serialize a report with sorted keys and a trailing newline; rerunning with
/// identical inputs yields byte-identical files.
inline void emit_report(const json& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path + ": cannot open for writing");
  out << report.dump(2) << "\n";
  if (!out) throw DataError(path + ": write failed");
}

inline std::uint64_t hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path + ": cannot open for hashing");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
    h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
  return h;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Layered configuration: a JSON file with nested sections, overridable by
/// dotted key=value pairs from the command line.
class Config {
 public:
  Config() : root_(json::object()) {}
  explicit Config(json root) : root_(std::move(root)) {}

  static Config from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("config file not found: " + path);
    json j;
    try {
      in >> j;
    } catch (const std::exception& e) {
      throw UsageError("config parse error in " + path + ": " + e.what());
    }
    return Config(std::move(j));
  }

  /// Apply a "section.key=value" override; values parse as JSON when
  /// possible, else as strings.
  void set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
      throw UsageError("override must look like key=value: " + assignment);
    const std::string key = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);
    json parsed;
    try {
      parsed = json::parse(value);
    } catch (const std::exception&) {
      parsed = value;
    }
    json* node = &root_;
    std::size_t start = 0;
    for (;;) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot - start);
      if (part.empty()) throw UsageError("bad config key: " + key);
      if (dot == std::string::npos) {
        (*node)[part] = parsed;
        break;
      }
      node = &(*node)[part];
      start = dot + 1;
    }
  }

  template <typename T>
  T get(const std::string& dotted, T fallback) const {
    const json* node = &root_;
    std::size_t start = 0;
    for (;;) {
      const auto dot = dotted.find('.', start);
      const std::string part = dotted.substr(start, dot - start);
      if (!node->is_object() || !node->contains(part)) return fallback;
      node = &(*node)[part];
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    try {
      return node->get<T>();
    } catch (const std::exception&) {
      throw UsageError("config key '" + dotted + "' has the wrong type");
    }
  }

  const json& raw() const { return root_; }

 private:
  json root_;
};

}  // namespace adopt::io
