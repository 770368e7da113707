#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace cytogate::csv {

/// Minimal comma-separated table: no quoting, no embedded commas. Every file
/// this toolkit writes fits that shape.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Index of a named column; throws Error(format) if absent.
  std::size_t column(std::string_view name) const;
  bool has_column(std::string_view name) const;
};

Table read(const std::filesystem::path& path);
Table parse(std::string_view text);
void write(const std::filesystem::path& path, const Table& table);
std::string format(const Table& table);

/// Shortest decimal text that round-trips the double exactly.
std::string format_double(double value);
double parse_double(std::string_view text);
long long parse_int(std::string_view text);

}  // namespace cytogate::csv
