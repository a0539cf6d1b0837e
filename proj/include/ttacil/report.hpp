#pragma once

// Seed-aggregated tables and accuracy-per-task plots from result records.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace ttacil {

struct CellStats {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation over seeds
  std::size_t n = 0;
};

inline CellStats cell_stats(const std::vector<double>& xs) {
  if (xs.empty()) throw std::invalid_argument("cell_stats: no values");
  CellStats s;
  s.n = xs.size();
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(s.n);
  double var = 0.0;
  for (double x : xs) var += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(var / static_cast<double>(s.n));
  return s;
}

/// A rendered table: row labels × column labels with optional cells.
struct Table {
  std::string title;
  std::string row_header;
  std::vector<std::string> rows;
  std::vector<std::string> columns;
  std::map<std::pair<std::string, std::string>, CellStats> cells;
  std::vector<std::string> gaps;  // human-readable notes on missing cells or seeds

  const CellStats* at(const std::string& row, const std::string& col) const {
    const auto it = cells.find({row, col});
    return it == cells.end() ? nullptr : &it->second;
  }
};

inline const std::vector<std::string_view>& table_names() {
  static const std::vector<std::string_view> names{"headline",       "ablation-params", "ablation-iters",
                                                   "ablation-batch", "ablation-aug",    "ordering",
                                                   "corruption"};
  return names;
}

namespace detail {

inline std::string corruption_label(const nlohmann::json& c) {
  if (c.is_null()) return "clean";
  std::string s = c.at("kind").get<std::string>() + "-" + std::to_string(c.at("severity").get<int>());
  if (c.contains("strength")) {
    std::ostringstream os;
    os << c.at("strength").get<double>();
    s += "@" + os.str();
  }
  return s;
}

/// Sort key that orders numeric labels numerically and others lexically.
inline bool label_less(const std::string& a, const std::string& b) {
  char* ea = nullptr;
  char* eb = nullptr;
  const double da = std::strtod(a.c_str(), &ea);
  const double db = std::strtod(b.c_str(), &eb);
  const bool na = !a.empty() && *ea == '\0', nb = !b.empty() && *eb == '\0';
  if (na && nb) return da < db;
  if (na != nb) return na;
  return a < b;
}

struct Point {
  std::string row, col;
  std::string replicate;  // "seed/order_seed"
  double value;
};

inline Table build_table(std::string title, std::string row_header, const std::vector<Point>& pts,
                         std::vector<std::string> row_order = {}, std::vector<std::string> col_order = {}) {
  Table t;
  t.title = std::move(title);
  t.row_header = std::move(row_header);
  std::map<std::pair<std::string, std::string>, std::map<std::string, double>> grid;
  std::set<std::string> all_seeds;
  for (const auto& p : pts) {
    auto& cell = grid[{p.row, p.col}];
    if (cell.contains(p.replicate)) {
      t.gaps.push_back("duplicate record for " + p.row + " / " + p.col + " seed/order " + p.replicate +
                       " (first kept)");
      continue;
    }
    cell[p.replicate] = p.value;
    all_seeds.insert(p.replicate);
    if (std::find(row_order.begin(), row_order.end(), p.row) == row_order.end()) row_order.push_back(p.row);
    if (std::find(col_order.begin(), col_order.end(), p.col) == col_order.end()) col_order.push_back(p.col);
  }
  t.rows = std::move(row_order);
  t.columns = std::move(col_order);
  for (const auto& r : t.rows) {
    for (const auto& c : t.columns) {
      const auto it = grid.find({r, c});
      if (it == grid.end()) {
        t.gaps.push_back("missing cell " + r + " / " + c);
        continue;
      }
      std::vector<double> xs;
      for (const auto& [seed, v] : it->second) xs.push_back(v);
      t.cells[{r, c}] = cell_stats(xs);
      if (it->second.size() < all_seeds.size()) {
        std::string miss;
        for (auto s : all_seeds) {
          if (!it->second.contains(s)) miss += (miss.empty() ? "" : ",") + s;
        }
        t.gaps.push_back("cell " + r + " / " + c + " lacks seed/order " + miss);
      }
    }
  }
  return t;
}

inline std::vector<std::string> sorted_rows(const std::vector<Point>& pts) {
  std::vector<std::string> rows;
  for (const auto& p : pts) {
    if (std::find(rows.begin(), rows.end(), p.row) == rows.end()) rows.push_back(p.row);
  }
  std::sort(rows.begin(), rows.end(), label_less);
  return rows;
}

}  // namespace detail

/// Aggregates records into the named table. Cells average over every (seed, order
/// seed) replicate except in the ordering table, where order seeds are rows. Ablation tables use the clean ttacil
/// records and vary one TTA setting per row; ordering and corruption tables have
/// one column per method label.
inline Table make_table(const std::vector<nlohmann::json>& records, std::string_view name) {
  using detail::Point;
  std::vector<Point> pts;
  auto seed_of = [](const nlohmann::json& r) {
    return std::to_string(r.at("config").at("seed").get<std::uint64_t>()) + "/" +
           std::to_string(r.at("config").at("order_seed").get<std::uint64_t>());
  };
  auto label_of = [](const nlohmann::json& r) { return r.at("config").at("label").get<std::string>(); };
  auto is_clean = [](const nlohmann::json& r) { return r.at("config").at("corruption").is_null(); };

  if (name == "headline") {
    for (const auto& r : records) {
      if (!is_clean(r)) continue;
      pts.push_back({label_of(r), "Abar", seed_of(r), r.at("average").get<double>()});
      pts.push_back({label_of(r), "A_T", seed_of(r), r.at("last").get<double>()});
    }
    return detail::build_table("Headline accuracy (clean test sets)", "method", pts, {}, {"Abar", "A_T"});
  }

  // Rows vary `key`; the other ablated settings must sit at their defaults.
  auto ablation = [&](const char* key, const char* title, const char* header) {
    const nlohmann::json defaults = {{"param_mode", "norm"}, {"iterations", 1}, {"batch_size", 16},
                                     {"views", 8},           {"reset", "per-batch"}};
    for (const auto& r : records) {
      const auto& c = r.at("config");
      if (!is_clean(r) || c.at("method") != "ttacil" || c.at("eval_order") != "by-task") continue;
      const auto& tta = c.at("tta");
      bool at_defaults = true;
      for (const auto& [k, v] : defaults.items()) {
        if (k != key && tta.at(k) != v) at_defaults = false;
      }
      if (!at_defaults) continue;
      const auto& v = tta.at(key);
      const std::string row = v.is_string() ? v.get<std::string>() : v.dump();
      pts.push_back({row, "Abar", seed_of(r), r.at("average").get<double>()});
      pts.push_back({row, "A_T", seed_of(r), r.at("last").get<double>()});
    }
    return detail::build_table(title, header, pts, detail::sorted_rows(pts), {"Abar", "A_T"});
  };
  if (name == "ablation-params") return ablation("param_mode", "Adapted parameter group", "param_mode");
  if (name == "ablation-iters") return ablation("iterations", "Test-time iterations", "N");
  if (name == "ablation-batch") return ablation("batch_size", "Test-time batch size", "B");
  if (name == "ablation-aug") return ablation("views", "Augmented views per sample", "M");

  if (name == "ordering") {
    for (const auto& r : records) {
      if (!is_clean(r)) continue;
      pts.push_back({std::to_string(r.at("config").at("order_seed").get<std::uint64_t>()), label_of(r), seed_of(r),
                     r.at("average").get<double>()});
    }
    return detail::build_table("Abar per class order", "order_seed", pts, detail::sorted_rows(pts));
  }
  if (name == "corruption") {
    for (const auto& r : records) {
      pts.push_back({detail::corruption_label(r.at("config").at("corruption")), label_of(r), seed_of(r),
                     r.at("average").get<double>()});
    }
    auto rows = detail::sorted_rows(pts);
    if (const auto it = std::find(rows.begin(), rows.end(), "clean"); it != rows.end()) {
      std::rotate(rows.begin(), it, it + 1);
    }
    return detail::build_table("Abar under test-time corruption", "corruption", pts, rows);
  }
  throw std::invalid_argument("unknown table '" + std::string(name) + "'");
}

/// Percentages with two decimals: "83.17 ± 1.20".
inline std::string format_cell(const CellStats& s) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f ± %.2f", 100.0 * s.mean, 100.0 * s.std);
  return buf;
}

inline std::string render_text(const Table& t) {
  std::vector<std::vector<std::string>> grid;
  grid.push_back({t.row_header});
  for (const auto& c : t.columns) grid.back().push_back(c);
  for (const auto& r : t.rows) {
    grid.push_back({r});
    for (const auto& c : t.columns) {
      const auto* s = t.at(r, c);
      grid.back().push_back(s ? format_cell(*s) : "n/a");
    }
  }
  auto width = [](const std::string& s) {
    std::size_t w = 0;
    for (unsigned char ch : s) w += (ch & 0xC0) != 0x80 ? 1 : 0;
    return w;
  };
  std::vector<std::size_t> widths(t.columns.size() + 1, 0);
  for (const auto& row : grid) {
    for (std::size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], width(row[i]));
  }
  std::ostringstream os;
  os << t.title << '\n';
  for (std::size_t r = 0; r < grid.size(); ++r) {
    for (std::size_t i = 0; i < grid[r].size(); ++i) {
      const std::string& cell = grid[r][i];
      const std::string pad(widths[i] - width(cell), ' ');
      os << (i == 0 ? cell + pad : "  " + pad + cell);
    }
    os << '\n';
    if (r == 0) {
      std::size_t total = widths[0];
      for (std::size_t i = 1; i < widths.size(); ++i) total += widths[i] + 2;
      os << std::string(total, '-') << '\n';
    }
  }
  if (t.rows.empty()) os << "(no matching records)\n";
  for (const auto& g : t.gaps) os << "gap: " << g << '\n';
  return os.str();
}

/// One line per cell: row,column,mean,std,n (fractions, not percentages).
inline std::string render_csv(const Table& t) {
  std::ostringstream os;
  os.precision(17);
  os << t.row_header << ",column,mean,std,n\n";
  for (const auto& r : t.rows) {
    for (const auto& c : t.columns) {
      const auto* s = t.at(r, c);
      os << r << ',' << c << ',';
      if (s) {
        os << s->mean << ',' << s->std << ',' << s->n;
      } else {
        os << ",,0";
      }
      os << '\n';
    }
  }
  return os.str();
}

/// Mean A_t versus task index per (method label, corruption), as an SVG line chart.
inline std::string plot_svg(const std::vector<nlohmann::json>& records) {
  std::map<std::string, std::vector<std::vector<double>>> series;  // name -> per seed curves
  for (const auto& r : records) {
    std::string name = r.at("config").at("label").get<std::string>();
    const std::string corr = detail::corruption_label(r.at("config").at("corruption"));
    if (corr != "clean") name += " (" + corr + ")";
    series[name].push_back(r.at("per_task").get<std::vector<double>>());
  }
  if (series.empty()) throw std::invalid_argument("plot: no records");

  std::map<std::string, std::vector<double>> means;
  std::size_t max_t = 1;
  for (const auto& [name, curves] : series) {
    std::size_t T = 0;
    for (const auto& c : curves) T = std::max(T, c.size());
    std::vector<double> m(T, 0.0);
    std::vector<std::size_t> n(T, 0);
    for (const auto& c : curves) {
      for (std::size_t t = 0; t < c.size(); ++t) {
        m[t] += c[t];
        ++n[t];
      }
    }
    for (std::size_t t = 0; t < T; ++t) m[t] /= static_cast<double>(n[t]);
    means[name] = m;
    max_t = std::max(max_t, T);
  }

  constexpr double W = 640, H = 400, L = 60, R = 200, Tm = 30, B = 50;
  const double pw = W - L - R, ph = H - Tm - B;
  auto x_of = [&](std::size_t t) {
    return L + (max_t == 1 ? pw / 2 : pw * static_cast<double>(t) / static_cast<double>(max_t - 1));
  };
  auto y_of = [&](double a) { return Tm + ph * (1.0 - a); };
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int i = 0; i <= 10; i += 2) {
    const double a = i / 10.0, y = y_of(a);
    os << "<line x1=\"" << L << "\" y1=\"" << y << "\" x2=\"" << L + pw << "\" y2=\"" << y
       << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << L - 8 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << i * 10 << "</text>\n";
  }
  for (std::size_t t = 0; t < max_t; ++t) {
    os << "<text x=\"" << x_of(t) << "\" y=\"" << Tm + ph + 18 << "\" text-anchor=\"middle\">" << t + 1
       << "</text>\n";
  }
  os << "<line x1=\"" << L << "\" y1=\"" << Tm + ph << "\" x2=\"" << L + pw << "\" y2=\"" << Tm + ph
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << Tm << "\" x2=\"" << L << "\" y2=\"" << Tm + ph
     << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">task</text>\n";
  os << "<text x=\"16\" y=\"" << Tm + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << Tm + ph / 2 << ")\">accuracy on seen classes (%)</text>\n";

  std::size_t k = 0;
  for (const auto& [name, m] : means) {
    const char* color = kColors[k % std::size(kColors)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t t = 0; t < m.size(); ++t) os << (t ? " " : "") << x_of(t) << ',' << y_of(m[t]);
    os << "\"/>\n";
    for (std::size_t t = 0; t < m.size(); ++t) {
      os << "<circle cx=\"" << x_of(t) << "\" cy=\"" << y_of(m[t]) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    const double ly = Tm + 10 + 18.0 * static_cast<double>(k);
    os << "<line x1=\"" << L + pw + 15 << "\" y1=\"" << ly << "\" x2=\"" << L + pw + 35 << "\" y2=\"" << ly
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    std::string esc;
    for (char ch : name) {
      if (ch == '&') esc += "&amp;";
      else if (ch == '<') esc += "&lt;";
      else if (ch == '>') esc += "&gt;";
      else esc += ch;
    }
    os << "<text x=\"" << L + pw + 40 << "\" y=\"" << ly + 4 << "\">" << esc << "</text>\n";
    ++k;
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace ttacil
