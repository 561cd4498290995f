#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "kvlab/errors.hpp"
#include "kvlab/harness/sweep.hpp"
#include "kvlab/ledger/event_log.hpp"

namespace kvlab {

inline constexpr const char* kResultsHeader = "method,setting,chunk,task,seed,score,footprint,peak";

inline std::string format_number(double v, const char* fmt = "%.10g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

inline std::string result_line(const ResultRow& r) {
  std::ostringstream os;
  os << r.method << ',' << format_number(r.setting, "%g") << ',' << r.chunk << ',' << r.task << ',' << r.seed << ',';
  if (!r.error.empty()) {
    os << "error,error,error";
  } else {
    os << format_number(r.score, "%.4f") << ',' << format_number(r.footprint) << ',' << format_number(r.peak);
  }
  return os.str();
}

inline void write_results_csv(std::ostream& os, const std::vector<ResultRow>& rows) {
  os << kResultsHeader << '\n';
  for (const auto& r : rows) os << result_line(r) << '\n';
}

inline std::vector<ResultRow> read_results_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open results " + path.string());
  std::string line;
  std::getline(is, line);
  if (detail::trim(line) != kResultsHeader) throw IoError(path.string() + ": unexpected results header");
  std::vector<ResultRow> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(detail::trim(cell));
    if (f.size() != 8) throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected 8 columns");
    ResultRow r;
    r.method = f[0];
    r.setting = std::stod(f[1]);
    r.chunk = std::stoul(f[2]);
    r.task = f[3];
    r.seed = std::stoull(f[4]);
    if (f[5] == "error") {
      r.error = "error";
    } else {
      r.score = std::stod(f[5]);
      r.footprint = std::stod(f[6]);
      r.peak = std::stod(f[7]);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

inline void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& summary) {
  os << "method,chunk,task,full_score,critical_footprint\n";
  for (const auto& s : summary) {
    os << s.method << ',' << s.chunk << ',' << s.task << ',' << format_number(s.full_score, "%.4f") << ','
       << (s.critical ? format_number(*s.critical) : std::string("not achieved")) << '\n';
  }
}

/// Standalone SVG: score (0..100) against footprint, one polyline per
/// (method, chunk) curve, with horizontal lines at the full score and at
/// `fraction` of it.
inline std::string score_plot_svg(const std::string& task, const std::map<CurveKey, std::vector<CurvePoint>>& all,
                                  double full_score, double fraction) {
  const double W = 640, H = 420, left = 60, right = 170, top = 30, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;
  double xmax = 1.0;
  for (const auto& [key, pts] : all)
    if (std::get<2>(key) == task)
      for (const auto& p : pts) xmax = std::max(xmax, p.footprint);
  auto X = [&](double f) { return left + pw * f / xmax; };
  auto Y = [&](double s) { return top + ph * (1.0 - std::clamp(s, 0.0, 100.0) / 100.0); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">" << task << ": score vs KV footprint</text>\n";
  os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double f = xmax * i / 4.0, s = 25.0 * i;
    os << "<text x=\"" << X(f) << "\" y=\"" << top + ph + 15 << "\" text-anchor=\"middle\">" << format_number(f, "%.2f") << "</text>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << Y(s) + 4 << "\" text-anchor=\"end\">" << s << "</text>\n";
  }
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">KV footprint</text>\n";
  os << "<text x=\"16\" y=\"" << top + ph / 2 << "\" transform=\"rotate(-90 16 " << top + ph / 2 << ")\" text-anchor=\"middle\">score</text>\n";
  for (const double level : {full_score, fraction * full_score}) {
    os << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << Y(level) << "\" y2=\"" << Y(level)
       << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
  }
  os << "<text x=\"" << left + pw + 4 << "\" y=\"" << Y(full_score) + 4 << "\" fill=\"gray\">full</text>\n";
  os << "<text x=\"" << left + pw + 4 << "\" y=\"" << Y(fraction * full_score) + 4 << "\" fill=\"gray\">"
     << format_number(fraction, "%g") << " x full</text>\n";
  std::size_t c = 0;
  for (const auto& [key, pts] : all) {
    const auto& [method, chunk, t] = key;
    if (t != task || method == "full") continue;
    std::vector<CurvePoint> sorted = pts;
    std::sort(sorted.begin(), sorted.end(), [](const CurvePoint& a, const CurvePoint& b) { return a.footprint < b.footprint; });
    const char* col = colors[c % 8];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& p : sorted) os << format_number(X(p.footprint), "%.2f") << ',' << format_number(Y(p.score), "%.2f") << ' ';
    os << "\"/>\n";
    for (const auto& p : sorted)
      os << "<circle cx=\"" << format_number(X(p.footprint), "%.2f") << "\" cy=\"" << format_number(Y(p.score), "%.2f")
         << "\" r=\"2.5\" fill=\"" << col << "\"/>\n";
    const double ly = top + 14.0 * static_cast<double>(c) + 30;
    os << "<line x1=\"" << left + pw + 8 << "\" x2=\"" << left + pw + 24 << "\" y1=\"" << ly << "\" y2=\"" << ly
       << "\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << left + pw + 28 << "\" y=\"" << ly + 4 << "\">" << method << " @" << (chunk ? std::to_string(chunk) : "all") << "</text>\n";
    ++c;
  }
  os << "</svg>\n";
  return os.str();
}

inline std::string event_log_name(std::size_t index, const ResultRow& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%04zu_%s_%g_%zu_%s_%llu.jsonl", index, r.method.c_str(), r.setting, r.chunk,
                r.task.c_str(), static_cast<unsigned long long>(r.seed));
  return buf;
}

/// Writes results.csv, summary.csv, plot_<task>.svg and, when rows carry
/// them, events/<row>.jsonl.
inline void emit_report(const std::vector<ResultRow>& rows, const std::vector<SummaryRow>& summary,
                        const std::filesystem::path& out_dir, double fraction = 0.9) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  auto open = [](const std::filesystem::path& p) {
    std::ofstream os(p);
    if (!os) throw IoError("cannot write " + p.string());
    return os;
  };
  {
    auto os = open(out_dir / "results.csv");
    write_results_csv(os, rows);
  }
  {
    auto os = open(out_dir / "summary.csv");
    write_summary_csv(os, summary);
  }
  const auto all = curves(rows);
  std::map<std::string, double> full;
  for (const auto& s : summary) full[s.task] = s.full_score;
  for (const auto& [task, score] : full) {
    auto os = open(out_dir / ("plot_" + task + ".svg"));
    os << score_plot_svg(task, all, score, fraction);
  }
  bool any_events = false;
  for (const auto& r : rows) any_events |= !r.events.empty();
  if (any_events) {
    std::filesystem::create_directories(out_dir / "events", ec);
    if (ec) throw IoError("cannot create " + (out_dir / "events").string() + ": " + ec.message());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].events.empty()) continue;
      save_event_log(out_dir / "events" / event_log_name(i, rows[i]), rows[i].events);
    }
  }
}

}  // namespace kvlab
