#include "tiltlab/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tiltlab/errors.hpp"

namespace tiltlab {

std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void CsvTable::add_row(std::vector<std::string> cells) {
  if (cells.size() != header_.size())
    fail(ErrorCode::ShapeMismatch, "CSV row width does not match header");
  rows_.push_back(std::move(cells));
}

std::string CsvTable::str() const {
  std::string out;
  for (std::size_t i = 0; i < header_.size(); ++i) {
    if (i) out += ',';
    out += header_[i];
  }
  out += '\n';
  for (const auto& row : rows_) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ',';
      out += row[i];
    }
    out += '\n';
  }
  return out;
}

void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::IoError, "cannot write " + tmp);
    out << content;
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::IoError, "cannot rename " + tmp + " to " + path);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot read " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::string render_scatter_svg(const std::string& title, const std::string& x_label,
                               const std::string& y_label,
                               const std::vector<ScatterPoint>& points,
                               const std::vector<std::string>& series_names) {
  constexpr int kWidth = 720, kHeight = 520;
  constexpr int kLeft = 70, kRight = 30, kTop = 50, kBottom = 60;
  static const char* kColors[] = {"#1f6fb2", "#d1622b", "#3a9150", "#8453a8"};

  double x_min = HUGE_VAL, x_max = -HUGE_VAL, y_min = HUGE_VAL, y_max = -HUGE_VAL;
  for (const auto& p : points) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) continue;
    x_min = std::min(x_min, p.x);
    x_max = std::max(x_max, p.x);
    y_min = std::min(y_min, p.y);
    y_max = std::max(y_max, p.y);
  }
  if (!(x_min <= x_max)) {
    x_min = 0.0;
    x_max = 1.0;
    y_min = 0.0;
    y_max = 1.0;
  }
  if (x_max == x_min) x_max = x_min + 1.0;
  if (y_max == y_min) y_max = y_min + 1.0;
  const double x_pad = 0.05 * (x_max - x_min);
  const double y_pad = 0.05 * (y_max - y_min);
  x_min -= x_pad;
  x_max += x_pad;
  y_min -= y_pad;
  y_max += y_pad;

  auto sx = [&](double x) {
    return kLeft + (x - x_min) / (x_max - x_min) * (kWidth - kLeft - kRight);
  };
  auto sy = [&](double y) {
    return kHeight - kBottom - (y - y_min) / (y_max - y_min) * (kHeight - kTop - kBottom);
  };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
      << kHeight << "\" viewBox=\"0 0 " << kWidth << " " << kHeight << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << kWidth / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">"
      << title << "</text>\n";
  // axes
  svg << "<line x1=\"" << kLeft << "\" y1=\"" << kHeight - kBottom << "\" x2=\""
      << kWidth - kRight << "\" y2=\"" << kHeight - kBottom
      << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
  svg << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\""
      << kHeight - kBottom << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x_min + (x_max - x_min) * i / 4.0;
    const double yv = y_min + (y_max - y_min) * i / 4.0;
    svg << "<text x=\"" << sx(xv) << "\" y=\"" << kHeight - kBottom + 18
        << "\" text-anchor=\"middle\" font-size=\"10\">" << format_g17(std::round(xv * 1e4) / 1e4)
        << "</text>\n";
    svg << "<text x=\"" << kLeft - 8 << "\" y=\"" << sy(yv) + 3
        << "\" text-anchor=\"end\" font-size=\"10\">" << format_g17(std::round(yv * 1e4) / 1e4)
        << "</text>\n";
  }
  svg << "<text x=\"" << (kLeft + kWidth - kRight) / 2 << "\" y=\"" << kHeight - 16
      << "\" text-anchor=\"middle\" font-size=\"12\">" << x_label << "</text>\n";
  svg << "<text x=\"18\" y=\"" << (kTop + kHeight - kBottom) / 2
      << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 18 "
      << (kTop + kHeight - kBottom) / 2 << ")\">" << y_label << "</text>\n";
  for (const auto& p : points) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) continue;
    const char* color = kColors[p.series % 4];
    svg << "<circle cx=\"" << sx(p.x) << "\" cy=\"" << sy(p.y)
        << "\" r=\"4\" fill=\"" << color << "\" fill-opacity=\"0.8\"/>\n";
  }
  for (std::size_t i = 0; i < series_names.size(); ++i) {
    const int y = kTop + static_cast<int>(i) * 18;
    svg << "<circle cx=\"" << kWidth - kRight - 110 << "\" cy=\"" << y << "\" r=\"4\" fill=\""
        << kColors[i % 4] << "\"/>\n";
    svg << "<text x=\"" << kWidth - kRight - 100 << "\" y=\"" << y + 4
        << "\" font-size=\"11\">" << series_names[i] << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace tiltlab
