#pragma once

// Avg, Last, Forgetting and Transfer over a stage x dataset accuracy
// matrix. Row u holds the state after training stage u; column n holds
// dataset n in task order.
//
//   Avg        = grand mean over all N*N cells (the per-stage means of all
//                datasets, averaged over stages).
//   Last       = mean of the final row.
//   Forgetting = mean over datasets of the column mean of the lower
//                triangle including the diagonal (F_n averages stages
//                v = n..N).
//   Transfer   = mean over datasets n >= 2 of the strict upper-triangle
//                column mean (R_n averages stages v = 1..n-1); undefined
//                for a single dataset.
//
// Accumulation runs in long double so a column of identical cells yields
// its common value exactly.

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "odcl/errors.hpp"

namespace odcl {

struct Matrix {
  std::size_t n = 0;
  std::vector<std::string> names;       // dataset per column
  std::vector<std::string> row_labels;  // stage labels; defaults to names
  std::vector<double> cells;            // row-major n x n

  static Matrix zeros(std::size_t n) {
    Matrix m;
    m.n = n;
    m.cells.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) m.names.push_back("col" + std::to_string(i));
    return m;
  }

  double at(std::size_t stage, std::size_t dataset) const { return cells[stage * n + dataset]; }
  double& at(std::size_t stage, std::size_t dataset) { return cells[stage * n + dataset]; }

  void validate() const {
    require(n >= 1, "matrix: empty");
    require(cells.size() == n * n, "matrix: shape must be N x N");
    require(names.size() == n, "matrix: one name per column required");
  }
};

inline double avg(const Matrix& m) {
  m.validate();
  long double total = 0.0L;
  for (double v : m.cells) total += v;
  return static_cast<double>(total / static_cast<long double>(m.n * m.n));
}

inline double last(const Matrix& m) {
  m.validate();
  long double total = 0.0L;
  for (std::size_t d = 0; d < m.n; ++d) total += m.at(m.n - 1, d);
  return static_cast<double>(total / static_cast<long double>(m.n));
}

// Per-dataset mean over all stages (the A_n breakdown).
inline std::vector<double> stage_mean_per_dataset(const Matrix& m) {
  m.validate();
  std::vector<double> out(m.n);
  for (std::size_t d = 0; d < m.n; ++d) {
    long double s = 0.0L;
    for (std::size_t u = 0; u < m.n; ++u) s += m.at(u, d);
    out[d] = static_cast<double>(s / static_cast<long double>(m.n));
  }
  return out;
}

// F_n: column means of the lower triangle including the diagonal.
inline std::vector<double> forgetting_per_dataset(const Matrix& m) {
  m.validate();
  std::vector<double> out(m.n);
  for (std::size_t d = 0; d < m.n; ++d) {
    long double s = 0.0L;
    for (std::size_t u = d; u < m.n; ++u) s += m.at(u, d);
    out[d] = static_cast<double>(s / static_cast<long double>(m.n - d));
  }
  return out;
}

inline double forgetting(const Matrix& m) {
  const std::vector<double> per = forgetting_per_dataset(m);
  long double s = 0.0L;
  for (double v : per) s += v;
  return static_cast<double>(s / static_cast<long double>(per.size()));
}

// R_n for n >= 2: strict upper-triangle column means.
inline std::vector<double> transfer_per_dataset(const Matrix& m) {
  m.validate();
  require(m.n >= 2, "transfer: undefined for a single dataset");
  std::vector<double> out(m.n - 1);
  for (std::size_t d = 1; d < m.n; ++d) {
    long double s = 0.0L;
    for (std::size_t u = 0; u < d; ++u) s += m.at(u, d);
    out[d - 1] = static_cast<double>(s / static_cast<long double>(d));
  }
  return out;
}

inline double transfer(const Matrix& m) {
  const std::vector<double> per = transfer_per_dataset(m);
  long double s = 0.0L;
  for (double v : per) s += v;
  return static_cast<double>(s / static_cast<long double>(per.size()));
}

struct MetricReport {
  std::size_t n = 0;
  std::vector<std::string> names;
  double avg = 0.0;
  double last = 0.0;
  double forgetting = 0.0;
  std::optional<double> transfer;            // absent when n == 1
  std::vector<double> stage_means;           // A_n
  std::vector<double> forgetting_breakdown;  // F_n
  std::vector<double> transfer_breakdown;    // R_n (n >= 2)
};

inline MetricReport compute_metrics(const Matrix& m) {
  MetricReport r;
  r.n = m.n;
  r.names = m.names;
  r.avg = avg(m);
  r.last = last(m);
  r.forgetting = forgetting(m);
  r.stage_means = stage_mean_per_dataset(m);
  r.forgetting_breakdown = forgetting_per_dataset(m);
  if (m.n >= 2) {
    r.transfer = transfer(m);
    r.transfer_breakdown = transfer_per_dataset(m);
  }
  return r;
}

// ---------------------------------------------------------------------------
// CSV I/O. Lines starting with '#' are provenance comments; the header row
// names the dataset columns; each data row starts with a stage label. A
// trailing "Mean" row (written for eyeball comparison with the published
// tables) is skipped on read.

inline std::string format_full(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", fraction * 100.0);
  return buf;
}

inline void write_matrix_csv(const std::filesystem::path& path, const Matrix& m,
                             const std::vector<std::string>& comments, bool append_mean_row = false) {
  m.validate();
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw NotFoundError("matrix csv: cannot open for writing: " + path.string());
  for (const auto& c : comments) out << "# " << c << "\n";
  out << "stage";
  for (const auto& name : m.names) out << "," << name;
  out << "\n";
  for (std::size_t u = 0; u < m.n; ++u) {
    out << (u < m.row_labels.size() ? m.row_labels[u] : "stage-" + std::to_string(u + 1));
    for (std::size_t d = 0; d < m.n; ++d) out << "," << format_full(m.at(u, d));
    out << "\n";
  }
  if (append_mean_row) {
    const std::vector<double> mean = forgetting_per_dataset(m);
    out << "Mean";
    for (double v : mean) out << "," << format_full(v);
    out << "\n";
  }
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline Matrix read_matrix_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("matrix csv: missing file: " + path.string());
  Matrix m;
  std::string line;
  bool have_header = false;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto fields = split_csv_line(line);
    require(fields.size() >= 2, "matrix csv: malformed row in " + path.string());
    if (!have_header) {
      m.names.assign(fields.begin() + 1, fields.end());
      have_header = true;
      continue;
    }
    std::string label = fields[0];
    std::transform(label.begin(), label.end(), label.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (label == "mean") continue;
    std::vector<double> row;
    for (std::size_t i = 1; i < fields.size(); ++i) {
      try {
        row.push_back(std::stod(fields[i]));
      } catch (const std::exception&) {
        throw ContractError("matrix csv: non-numeric cell '" + fields[i] + "' in " + path.string());
      }
    }
    require(row.size() == m.names.size(), "matrix csv: row width disagrees with header in " + path.string());
    m.row_labels.push_back(fields[0]);
    rows.push_back(std::move(row));
  }
  require(have_header && !rows.empty(), "matrix csv: no data in " + path.string());
  require(rows.size() == m.names.size(), "matrix csv: matrix must be square (stages == datasets)");
  m.n = rows.size();
  for (auto& r : rows) m.cells.insert(m.cells.end(), r.begin(), r.end());
  return m;
}

// ---------------------------------------------------------------------------
// report I/O

inline void write_metric_report_csv(const std::filesystem::path& path, const MetricReport& r,
                                    const std::vector<std::string>& comments) {
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw NotFoundError("metric report: cannot open for writing: " + path.string());
  for (const auto& c : comments) out << "# " << c << "\n";
  out << "metric,fraction,percent\n";
  out << "avg," << format_full(r.avg) << "," << format_percent(r.avg) << "\n";
  out << "last," << format_full(r.last) << "," << format_percent(r.last) << "\n";
  out << "forgetting," << format_full(r.forgetting) << "," << format_percent(r.forgetting) << "\n";
  if (r.transfer)
    out << "transfer," << format_full(*r.transfer) << "," << format_percent(*r.transfer) << "\n";
  else
    out << "transfer,undefined,undefined\n";
}

}  // namespace odcl
