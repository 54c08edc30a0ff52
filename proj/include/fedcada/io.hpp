#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "fedcada/errors.hpp"
#include "fedcada/metrics.hpp"

namespace fedcada {

/// Shortest decimal text that parses back to the same double.
inline std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

/// Writes to `<path>.tmp` and renames over `path`, so readers never observe
/// a half-written file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(content.data(), std::streamsize(content.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw LoadError("csv: no column named " + std::string(name));
  }

  double real(std::size_t row, std::size_t col) const {
    const std::string& s = rows.at(row).at(col);
    if (s == "nan") return std::nan("");
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size())
      throw LoadError("csv: cannot parse '" + s + "' as a number");
    return v;
  }
  double real(std::size_t row, std::string_view name) const { return real(row, column(name)); }
};

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.emplace_back(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

/// Reads a comma-separated file. With `has_header` the first line names the
/// columns. Every row must have the same width.
inline CsvTable read_csv(const std::filesystem::path& path, bool has_header = true) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  CsvTable t;
  std::string line;
  bool first = true;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (first) {
      width = fields.size();
      first = false;
      if (has_header) {
        t.header = std::move(fields);
        continue;
      }
    }
    if (fields.size() != width) throw LoadError("csv: ragged row in " + path.string());
    t.rows.push_back(std::move(fields));
  }
  return t;
}

/// K rows of K comma-separated reals; undefined cells are written as nan.
inline std::string cka_matrix_csv(const CkaMatrix& m) {
  std::ostringstream os;
  for (std::size_t i = 0; i < m.k; ++i) {
    for (std::size_t j = 0; j < m.k; ++j) {
      if (j) os << ',';
      const auto& c = m.at(i, j);
      os << (c ? format_real(*c) : std::string("nan"));
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace fedcada
