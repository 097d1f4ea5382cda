#include "sgdthermo/svg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace sgdthermo {

namespace {

struct AxisMap {
  double lo, hi;
  bool log;
  double pix_lo, pix_hi;

  double operator()(double v) const {
    double t = log ? std::log10(v) : v;
    double a = log ? std::log10(lo) : lo;
    double b = log ? std::log10(hi) : hi;
    if (b - a < 1e-300) return 0.5 * (pix_lo + pix_hi);
    return pix_lo + (t - a) / (b - a) * (pix_hi - pix_lo);
  }
};

bool usable(double v, bool log) { return std::isfinite(v) && (!log || v > 0); }

}  // namespace

void write_svg_plot(const std::string& path, const SvgPlotSpec& spec) {
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const auto& s : spec.series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!usable(s.x[i], spec.log_x) || !usable(s.y[i], spec.log_y)) continue;
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  if (!(xmin <= xmax)) { xmin = 0; xmax = 1; ymin = 0; ymax = 1; }
  if (xmin == xmax) { xmin -= 0.5; xmax += 0.5; }
  if (ymin == ymax) { ymin -= 0.5; ymax += 0.5; }
  if (!spec.log_x) { const double pad = 0.05 * (xmax - xmin); xmin -= pad; xmax += pad; }
  if (!spec.log_y) { const double pad = 0.05 * (ymax - ymin); ymin -= pad; ymax += pad; }

  const double L = 70, R = spec.width - 20, T = 40, B = spec.height - 50;
  AxisMap X{xmin, xmax, spec.log_x, L, R};
  AxisMap Y{ymin, ymax, spec.log_y, B, T};

  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << spec.width
      << "' height='" << spec.height << "'>\n"
      << "<rect width='100%' height='100%' fill='white'/>\n"
      << "<text x='" << spec.width / 2 << "' y='20' text-anchor='middle' font-size='14'>"
      << spec.title << "</text>\n"
      << "<line x1='" << L << "' y1='" << B << "' x2='" << R << "' y2='" << B
      << "' stroke='black'/>\n"
      << "<line x1='" << L << "' y1='" << B << "' x2='" << L << "' y2='" << T
      << "' stroke='black'/>\n"
      << "<text x='" << (L + R) / 2 << "' y='" << spec.height - 12
      << "' text-anchor='middle' font-size='12'>" << spec.x_label << "</text>\n"
      << "<text x='16' y='" << (T + B) / 2
      << "' text-anchor='middle' font-size='12' transform='rotate(-90 16 "
      << (T + B) / 2 << ")'>" << spec.y_label << "</text>\n";
  // axis end labels
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3g", v);
    return std::string(buf);
  };
  out << "<text x='" << L << "' y='" << B + 16 << "' font-size='10'>" << fmt(xmin)
      << "</text>\n"
      << "<text x='" << R << "' y='" << B + 16 << "' text-anchor='end' font-size='10'>"
      << fmt(xmax) << "</text>\n"
      << "<text x='" << L - 4 << "' y='" << B << "' text-anchor='end' font-size='10'>"
      << fmt(ymin) << "</text>\n"
      << "<text x='" << L - 4 << "' y='" << T + 4 << "' text-anchor='end' font-size='10'>"
      << fmt(ymax) << "</text>\n";

  if (spec.diagonal) {
    const double lo = std::max(xmin, ymin), hi = std::min(xmax, ymax);
    if (lo < hi)
      out << "<line x1='" << X(lo) << "' y1='" << Y(lo) << "' x2='" << X(hi)
          << "' y2='" << Y(hi) << "' stroke='#999' stroke-dasharray='4,3'/>\n";
  }

  int legend_y = static_cast<int>(T) + 8;
  for (const auto& s : spec.series) {
    if (s.line) {
      out << "<polyline fill='none' stroke='" << s.color << "' stroke-width='1.5' points='";
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (!usable(s.x[i], spec.log_x) || !usable(s.y[i], spec.log_y)) continue;
        out << X(s.x[i]) << ',' << Y(s.y[i]) << ' ';
      }
      out << "'/>\n";
    } else {
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (!usable(s.x[i], spec.log_x) || !usable(s.y[i], spec.log_y)) continue;
        out << "<circle cx='" << X(s.x[i]) << "' cy='" << Y(s.y[i])
            << "' r='2.5' fill='" << s.color << "' fill-opacity='0.7'/>\n";
      }
    }
    if (!s.label.empty()) {
      out << "<circle cx='" << R - 130 << "' cy='" << legend_y << "' r='3' fill='"
          << s.color << "'/>\n"
          << "<text x='" << R - 122 << "' y='" << legend_y + 4 << "' font-size='11'>"
          << s.label << "</text>\n";
      legend_y += 16;
    }
  }
  out << "</svg>\n";
}

}  // namespace sgdthermo
