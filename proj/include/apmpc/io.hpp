#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace apmpc {

// Shortest decimal text that parses back to the same double. Output is
// byte-stable across runs, which the report determinism contract relies on.
std::string format_double(double value);
double parse_double(std::string_view text);
long long parse_int(std::string_view text);

std::vector<std::string> split(std::string_view text, char sep);
std::string_view trim(std::string_view text);

// Minimal numeric CSV: one header row, then rows of numbers.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  std::size_t column(std::string_view name) const;
  std::vector<double> column_values(std::string_view name) const;
};

CsvTable read_csv(const std::filesystem::path& path);
void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows);

// Writes text atomically enough for our purposes: parent directories are
// created first.
void write_text(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

// Flat container of named dense tensors plus string metadata.
//
//   apmpc-tensors v1
//   meta <key> <value>
//   tensor <name> <rows> <cols>
//   <row-major values, one row per line>
//
// Names are unique; iteration order is lexicographic so files are canonical.
struct TensorStore {
  static constexpr int kVersion = 1;

  std::map<std::string, std::string> meta;
  std::map<std::string, Eigen::MatrixXd> tensors;

  const Eigen::MatrixXd& at(const std::string& name) const;
  const std::string& meta_at(const std::string& key) const;

  void write(std::ostream& out) const;
  static TensorStore read(std::istream& in);

  void save(const std::filesystem::path& path) const;
  static TensorStore load(const std::filesystem::path& path);
};

}  // namespace apmpc
