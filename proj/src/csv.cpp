#include "gxe/csv.hpp"

#include <charconv>
#include <cstdlib>
#include <system_error>

namespace gxe {

std::string format_double(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

CsvReader::CsvReader(const std::string& path) : path_(path), in_(path) {
  if (!in_) throw ValidationError("cannot open file: " + path);
}

bool CsvReader::next_row(std::vector<std::string>& fields) {
  fields.clear();
  std::string line;
  if (!std::getline(in_, line)) return false;
  ++line_;
  if (!line.empty() && line.back() == '\r') line.pop_back();

  std::string cur;
  bool in_quotes = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      if (!cur.empty()) fail("unexpected quote inside unquoted field");
      in_quotes = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (in_quotes) fail("unterminated quoted field");
  fields.push_back(std::move(cur));
  return true;
}

double CsvReader::parse_double(const std::string& field, const std::string& what) const {
  double value = 0.0;
  auto res = std::from_chars(field.data(), field.data() + field.size(), value);
  if (res.ec != std::errc() || res.ptr != field.data() + field.size())
    fail("non-numeric " + what + ": \"" + field + "\"");
  return value;
}

double CsvReader::parse_double_or_missing(const std::string& field,
                                          const std::string& what) const {
  if (field.empty()) return missing_value();
  return parse_double(field, what);
}

long CsvReader::parse_long(const std::string& field, const std::string& what) const {
  long value = 0;
  auto res = std::from_chars(field.data(), field.data() + field.size(), value);
  if (res.ec != std::errc() || res.ptr != field.data() + field.size())
    fail("non-integer " + what + ": \"" + field + "\"");
  return value;
}

CsvWriter::CsvWriter(const std::string& path) : out_(path), path_(path) {
  if (!out_) throw ValidationError("cannot open file for writing: " + path);
}

std::string CsvWriter::quote_if_needed(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string q = "\"";
  for (char c : field) {
    if (c == '"') q += "\"\"";
    else q.push_back(c);
  }
  q.push_back('"');
  return q;
}

void CsvWriter::write_row(const std::vector<std::string>& fields) {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out_ << ',';
    out_ << quote_if_needed(fields[i]);
  }
  out_ << '\n';
  if (!out_) throw ValidationError("write failed: " + path_);
}

void CsvWriter::write_row_numeric(const std::string& id, const std::vector<double>& values) {
  out_ << quote_if_needed(id);
  for (double v : values) {
    out_ << ',';
    if (!is_missing(v)) out_ << format_double(v);
  }
  out_ << '\n';
  if (!out_) throw ValidationError("write failed: " + path_);
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  CsvReader reader(path);
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> fields;
  while (reader.next_row(fields)) rows.push_back(fields);
  return rows;
}

}  // namespace gxe
