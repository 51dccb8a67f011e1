#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace prefdyn {

// Shortest form that still carries 17 significant digits, '.' decimal point,
// independent of the global locale. Non-finite values print as nan/inf/-inf.
std::string format_double(double value);

/// In-memory CSV table: header row, comma separator, LF line endings.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header);

  static std::string cell(double value) { return format_double(value); }
  static std::string cell(std::int64_t value) { return std::to_string(value); }
  static std::string cell(int value) { return std::to_string(value); }
  // Empty cell when missing.
  static std::string cell(std::optional<double> value);
  // Quoted when it contains a comma, quote or newline.
  static std::string cell(std::string_view text);

  // Throws std::invalid_argument if the row width differs from the header.
  void add_row(std::vector<std::string> cells);

  const std::vector<std::string>& header() const { return header_; }
  const std::vector<std::vector<std::string>>& rows() const { return rows_; }

  std::string str() const;
  void write(const std::filesystem::path& path) const;

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

// Reads a file written by CsvTable::write.
CsvTable read_csv(const std::filesystem::path& path);

}  // namespace prefdyn
