#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <sstream>
#include <string>
#include <vector>

// Tiny standalone SVG writers: line charts, heatmaps and histograms. Every
// figure embeds its numbers in an XML comment so emitted files are diffable
// without a renderer.

namespace mass {

namespace svg {

inline std::string num(double v) {
  std::ostringstream ss;
  ss << v;
  return ss.str();
}

struct Series {
  std::string label;
  std::vector<double> y;
  std::string color = "#1f77b4";
  bool log_scale_hint = false;
};

// polyline chart over implicit x = 0..n-1
inline std::string line_chart(const std::string& title, std::span<const Series> series,
                              bool log_y = false) {
  const int W = 720, H = 420, ml = 60, mr = 16, mt = 32, mb = 36;
  double ymin = 1e300, ymax = -1e300;
  size_t nmax = 0;
  for (const auto& s : series) {
    nmax = std::max(nmax, s.y.size());
    for (double v : s.y) {
      double t = log_y ? (v > 0 ? std::log10(v) : NAN) : v;
      if (!std::isfinite(t)) continue;
      ymin = std::min(ymin, t);
      ymax = std::max(ymax, t);
    }
  }
  if (ymin > ymax) {
    ymin = 0;
    ymax = 1;
  }
  if (ymax == ymin) ymax = ymin + 1;

  std::ostringstream out;
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
  out << "<!-- data";
  for (const auto& s : series) {
    out << "\n" << s.label << ":";
    for (double v : s.y) out << " " << num(v);
  }
  out << "\n-->\n";
  out << "<rect width='100%' height='100%' fill='white'/>\n";
  out << "<text x='" << W / 2 << "' y='20' text-anchor='middle' font-size='14'>" << title
      << "</text>\n";
  auto xpix = [&](double i) { return ml + i * (W - ml - mr) / std::max<size_t>(nmax - 1, 1); };
  auto ypix = [&](double v) {
    double t = log_y ? std::log10(std::max(v, 1e-300)) : v;
    return mt + (ymax - t) * (H - mt - mb) / (ymax - ymin);
  };
  out << "<line x1='" << ml << "' y1='" << H - mb << "' x2='" << W - mr << "' y2='" << H - mb
      << "' stroke='black'/>\n";
  out << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << H - mb
      << "' stroke='black'/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    double t = ymin + tick * (ymax - ymin) / 4;
    double v = log_y ? std::pow(10, t) : t;
    double y = mt + (ymax - t) * (H - mt - mb) / (ymax - ymin);
    out << "<text x='" << ml - 6 << "' y='" << y + 4 << "' text-anchor='end' font-size='10'>"
        << num(v) << "</text>\n";
  }
  int li = 0;
  for (const auto& s : series) {
    out << "<polyline fill='none' stroke='" << s.color << "' stroke-width='1.2' points='";
    for (size_t i = 0; i < s.y.size(); ++i) {
      double v = s.y[i];
      if (log_y && v <= 0) continue;
      out << xpix(static_cast<double>(i)) << "," << ypix(v) << " ";
    }
    out << "'/>\n";
    out << "<text x='" << W - mr - 4 << "' y='" << mt + 14 * (li + 1)
        << "' text-anchor='end' font-size='11' fill='" << s.color << "'>" << s.label
        << "</text>\n";
    ++li;
  }
  out << "</svg>\n";
  return out.str();
}

// blue-white-red map for correlations, white-to-dark for magnitudes
inline std::string heat_color(double v, bool diverging) {
  v = std::clamp(v, diverging ? -1.0 : 0.0, 1.0);
  int r, g, b;
  if (diverging) {
    if (v >= 0) {
      r = 255;
      g = b = static_cast<int>(255 * (1 - v));
    } else {
      b = 255;
      r = g = static_cast<int>(255 * (1 + v));
    }
  } else {
    r = g = b = static_cast<int>(255 * (1 - v));
  }
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
  return buf;
}

inline std::string heatmap(const std::string& title, std::span<const double> values, int rows,
                           int cols, bool diverging) {
  const int cell = std::max(2, std::min(14, 640 / std::max(rows, cols)));
  const int ml = 40, mt = 32;
  const int W = ml + cols * cell + 16, H = mt + rows * cell + 16;
  std::ostringstream out;
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
  out << "<!-- data rows=" << rows << " cols=" << cols;
  for (int r = 0; r < rows; ++r) {
    out << "\n";
    for (int c = 0; c < cols; ++c) out << num(values[static_cast<size_t>(r) * cols + c]) << " ";
  }
  out << "\n-->\n";
  out << "<rect width='100%' height='100%' fill='white'/>\n";
  out << "<text x='" << W / 2 << "' y='20' text-anchor='middle' font-size='14'>" << title
      << "</text>\n";
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      out << "<rect x='" << ml + c * cell << "' y='" << mt + r * cell << "' width='" << cell
          << "' height='" << cell << "' fill='"
          << heat_color(values[static_cast<size_t>(r) * cols + c], diverging) << "'/>\n";
  out << "</svg>\n";
  return out.str();
}

inline std::string histogram(const std::string& title, std::span<const double> values, int bins) {
  double lo = 1e300, hi = -1e300;
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (lo > hi) {
    lo = 0;
    hi = 1;
  }
  if (hi == lo) hi = lo + 1;
  std::vector<int> count(bins, 0);
  for (double v : values) {
    int b = std::min(bins - 1, static_cast<int>((v - lo) / (hi - lo) * bins));
    count[std::max(0, b)]++;
  }
  int cmax = 1;
  for (int c : count) cmax = std::max(cmax, c);
  const int W = 560, H = 320, ml = 40, mb = 30, mt = 32;
  double bw = static_cast<double>(W - ml - 16) / bins;
  std::ostringstream out;
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
  out << "<!-- data lo=" << num(lo) << " hi=" << num(hi) << " counts:";
  for (int c : count) out << " " << c;
  out << " -->\n";
  out << "<rect width='100%' height='100%' fill='white'/>\n";
  out << "<text x='" << W / 2 << "' y='20' text-anchor='middle' font-size='14'>" << title
      << "</text>\n";
  for (int b = 0; b < bins; ++b) {
    double h = static_cast<double>(count[b]) / cmax * (H - mt - mb);
    out << "<rect x='" << ml + b * bw << "' y='" << H - mb - h << "' width='" << bw * 0.92
        << "' height='" << h << "' fill='#1f77b4'/>\n";
  }
  out << "<text x='" << ml << "' y='" << H - 8 << "' font-size='10'>" << num(lo) << "</text>\n";
  out << "<text x='" << W - 16 << "' y='" << H - 8 << "' text-anchor='end' font-size='10'>"
      << num(hi) << "</text>\n";
  out << "</svg>\n";
  return out.str();
}

}  // namespace svg

}  // namespace mass
