#pragma once

#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "gxe/error.hpp"

namespace gxe {

inline double missing_value() { return std::numeric_limits<double>::quiet_NaN(); }
inline bool is_missing(double x) { return x != x; }

// Shortest round-trip decimal representation; identical output on every run
// of the same binary, which the reproducibility contract relies on.
std::string format_double(double x);

// RFC-4180-ish reader: quoted fields, embedded commas/quotes, LF or CRLF.
class CsvReader {
 public:
  explicit CsvReader(const std::string& path);

  // false at EOF; throws ParseError on structural problems
  bool next_row(std::vector<std::string>& fields);

  long line() const { return line_; }
  const std::string& path() const { return path_; }

  [[noreturn]] void fail(const std::string& msg) const { throw ParseError(path_, line_, msg); }

  // parse helpers that report path:line on bad input
  double parse_double(const std::string& field, const std::string& what) const;
  // empty field = missing
  double parse_double_or_missing(const std::string& field, const std::string& what) const;
  long parse_long(const std::string& field, const std::string& what) const;

 private:
  std::string path_;
  std::ifstream in_;
  long line_ = 0;
};

class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path);

  void write_row(const std::vector<std::string>& fields);
  // missing values are emitted as empty fields
  void write_row_numeric(const std::string& id, const std::vector<double>& values);

  static std::string quote_if_needed(const std::string& field);

 private:
  std::ofstream out_;
  std::string path_;
};

// one full file into rows (header row included)
std::vector<std::vector<std::string>> read_csv(const std::string& path);

}  // namespace gxe
