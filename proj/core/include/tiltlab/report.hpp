#pragma once

// CSV/SVG emission helpers. All floats print as %.17g so reruns with the same
// seed are byte-identical regardless of thread count.

#include <string>
#include <vector>

namespace tiltlab {

std::string format_g17(double v);

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  void add_row(std::vector<std::string> cells);
  std::string str() const;
  std::size_t rows() const { return rows_.size(); }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

// write-temp-then-rename
void write_file_atomic(const std::string& path, const std::string& content);
std::string read_file(const std::string& path);

struct ScatterPoint {
  double x = 0.0;
  double y = 0.0;
  int series = 0;  // color index
};

// Self-contained static SVG scatter, one circle per point.
std::string render_scatter_svg(const std::string& title, const std::string& x_label,
                               const std::string& y_label,
                               const std::vector<ScatterPoint>& points,
                               const std::vector<std::string>& series_names);

}  // namespace tiltlab
