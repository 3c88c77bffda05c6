#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "unsr/common.hpp"

namespace unsr {

// One row per test interval. The column set is fixed; values are serialized
// with shortest-round-trip formatting so a reader recovers the exact doubles.
struct MetricsRow {
  long step = 0;
  long episodes = 0;
  double epsilon = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double train_return_mean = 0.0;
  double test_return_mean = 0.0;
  double test_success_rate = 0.0;
  double q_tot_mean = 0.0;
};

inline const char* kMetricsHeader =
    "step,episodes,epsilon,loss,grad_norm,train_return_mean,test_return_mean,"
    "test_success_rate,q_tot_mean";

inline const std::array<const char*, 7>& metrics_series_names() {
  static const std::array<const char*, 7> names = {
      "epsilon",          "loss",           "grad_norm", "train_return_mean",
      "test_return_mean", "test_success_rate", "q_tot_mean"};
  return names;
}

inline double metrics_value(const MetricsRow& r, const std::string& series) {
  if (series == "epsilon") return r.epsilon;
  if (series == "loss") return r.loss;
  if (series == "grad_norm") return r.grad_norm;
  if (series == "train_return_mean") return r.train_return_mean;
  if (series == "test_return_mean") return r.test_return_mean;
  if (series == "test_success_rate") return r.test_success_rate;
  if (series == "q_tot_mean") return r.q_tot_mean;
  throw UsageError("metrics: unknown series \"" + series + "\"");
}

inline std::string format_double(double v) {
  std::array<char, 64> buf;
  auto [p, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc()) throw RuntimeError("metrics: number formatting failed");
  return std::string(buf.data(), p);
}

inline std::string metrics_line(const MetricsRow& r) {
  std::ostringstream os;
  os << r.step << ',' << r.episodes << ',' << format_double(r.epsilon) << ','
     << format_double(r.loss) << ',' << format_double(r.grad_norm) << ','
     << format_double(r.train_return_mean) << ',' << format_double(r.test_return_mean) << ','
     << format_double(r.test_success_rate) << ',' << format_double(r.q_tot_mean);
  return os.str();
}

// Appends rows to a CSV file, header first. Flushes per row so a crashed run
// leaves usable metrics behind.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path) : path_(path), out_(path) {
    if (!out_) throw RuntimeError("metrics: cannot write " + path);
    out_ << kMetricsHeader << '\n';
    out_.flush();
  }

  void append(const MetricsRow& r) {
    out_ << metrics_line(r) << '\n';
    out_.flush();
    if (!out_) throw RuntimeError("metrics: write failed on " + path_);
  }

  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
};

inline std::vector<MetricsRow> parse_metrics(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw UsageError("metrics: empty file");
  if (line != kMetricsHeader) throw UsageError("metrics: unexpected header \"" + line + "\"");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> f;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      std::size_t comma = line.find(',', pos);
      std::string cell = line.substr(pos, comma == std::string::npos ? comma : comma - pos);
      char* end = nullptr;
      f.push_back(std::strtod(cell.c_str(), &end));
      if (end == cell.c_str()) throw UsageError("metrics: bad cell \"" + cell + "\"");
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (f.size() != 9) throw UsageError("metrics: expected 9 columns, found row with " +
                                        std::to_string(f.size()));
    MetricsRow r;
    r.step = static_cast<long>(f[0]);
    r.episodes = static_cast<long>(f[1]);
    r.epsilon = f[2];
    r.loss = f[3];
    r.grad_norm = f[4];
    r.train_return_mean = f[5];
    r.test_return_mean = f[6];
    r.test_success_rate = f[7];
    r.q_tot_mean = f[8];
    rows.push_back(r);
  }
  return rows;
}

inline std::vector<MetricsRow> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("metrics: cannot read " + path);
  return parse_metrics(in);
}

namespace plot_detail {

inline std::string color_for(std::size_t i) {
  static const std::array<const char*, 6> palette = {"#1f77b4", "#d62728", "#2ca02c",
                                                     "#9467bd", "#ff7f0e", "#8c564b"};
  return palette[i % palette.size()];
}

}  // namespace plot_detail

// Renders a standalone SVG line chart of the requested series against the
// step column. Steps must be strictly increasing; all series share one value
// axis.
inline std::string render_plot(const std::vector<MetricsRow>& rows,
                               const std::vector<std::string>& series) {
  if (rows.empty()) throw UsageError("plot: refusing to plot empty metrics");
  if (series.empty()) throw UsageError("plot: no series requested");
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].step <= rows[i - 1].step)
      throw UsageError("plot: step column must be strictly increasing (row " +
                       std::to_string(i + 1) + ")");

  double lo_x = static_cast<double>(rows.front().step);
  double hi_x = static_cast<double>(rows.back().step);
  double lo_y = std::numeric_limits<double>::infinity();
  double hi_y = -std::numeric_limits<double>::infinity();
  for (const auto& s : series)
    for (const auto& r : rows) {
      const double v = metrics_value(r, s);
      if (!std::isfinite(v)) continue;
      lo_y = std::min(lo_y, v);
      hi_y = std::max(hi_y, v);
    }
  if (!std::isfinite(lo_y)) {
    lo_y = 0.0;
    hi_y = 1.0;
  }
  if (hi_y - lo_y < 1e-12) {
    lo_y -= 1.0;
    hi_y += 1.0;
  }
  if (hi_x - lo_x < 1e-12) {
    lo_x -= 1.0;
    hi_x += 1.0;
  }

  const double width = 720.0, height = 420.0;
  const double ml = 72.0, mr = 24.0, mt = 28.0, mb = 56.0;
  auto sx = [&](double x) { return ml + (x - lo_x) / (hi_x - lo_x) * (width - ml - mr); };
  auto sy = [&](double y) {
    return height - mb - (y - lo_y) / (hi_y - lo_y) * (height - mt - mb);
  };

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n"
      << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height
      << "\" fill=\"white\"/>\n";

  svg << "<line x1=\"" << ml << "\" y1=\"" << height - mb << "\" x2=\"" << width - mr
      << "\" y2=\"" << height - mb << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
      << height - mb << "\" stroke=\"black\"/>\n";

  svg << "<text x=\"" << (ml + width - mr) / 2 << "\" y=\"" << height - 16
      << "\" text-anchor=\"middle\" font-size=\"13\">environment steps</text>\n";
  svg << "<text x=\"18\" y=\"" << (mt + height - mb) / 2
      << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 "
      << (mt + height - mb) / 2 << ")\">value</text>\n";

  auto tick = [&](double v, bool x_axis) {
    if (x_axis)
      svg << "<text x=\"" << sx(v) << "\" y=\"" << height - mb + 18
          << "\" text-anchor=\"middle\" font-size=\"11\">" << format_double(v) << "</text>\n";
    else
      svg << "<text x=\"" << ml - 6 << "\" y=\"" << sy(v) + 4
          << "\" text-anchor=\"end\" font-size=\"11\">" << format_double(v) << "</text>\n";
  };
  tick(lo_x, true);
  tick(hi_x, true);
  tick(lo_y, false);
  tick(hi_y, false);

  for (std::size_t si = 0; si < series.size(); ++si) {
    const std::string color = plot_detail::color_for(si);
    std::ostringstream pts;
    for (const auto& r : rows) {
      const double v = metrics_value(r, series[si]);
      if (!std::isfinite(v)) continue;
      pts << sx(static_cast<double>(r.step)) << ',' << sy(v) << ' ';
    }
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\""
        << pts.str() << "\"/>\n";
    for (const auto& r : rows) {
      const double v = metrics_value(r, series[si]);
      if (!std::isfinite(v)) continue;
      svg << "<circle cx=\"" << sx(static_cast<double>(r.step)) << "\" cy=\"" << sy(v)
          << "\" r=\"2.5\" fill=\"" << color << "\"/>\n";
    }
    svg << "<text x=\"" << width - mr - 8 << "\" y=\"" << mt + 16.0 * static_cast<double>(si)
        << "\" text-anchor=\"end\" font-size=\"12\" fill=\"" << color << "\">" << series[si]
        << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

inline void emit_plot(const std::vector<MetricsRow>& rows, const std::vector<std::string>& series,
                      const std::string& out_path) {
  const std::string svg = render_plot(rows, series);
  std::ofstream out(out_path);
  if (!out) throw RuntimeError("plot: cannot write " + out_path);
  out << svg;
  if (!out) throw RuntimeError("plot: write failed on " + out_path);
}

}  // namespace unsr
