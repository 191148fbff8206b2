#pragma once

// Small helpers shared by every artifact writer: shortest round-trip number
// formatting and a strict numeric CSV reader.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace til {

/// Shortest decimal representation that parses back to the same double.
/// Infinities are written as "inf" / "-inf" and NaN as "nan".
std::string format_number(double v);

/// Inverse of format_number. Throws std::invalid_argument on malformed input.
double parse_number(std::string_view s);

std::vector<std::string> split_csv_line(std::string_view line);
std::string join_csv_line(const std::vector<std::string>& fields);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Index of a header column; throws std::out_of_range if absent.
  std::size_t column(std::string_view name) const;
};

CsvTable read_csv(const std::filesystem::path& path);
void write_csv(const std::filesystem::path& path, const CsvTable& table);

/// Reads a whole text file; throws std::runtime_error when it cannot be opened.
std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

}  // namespace til
