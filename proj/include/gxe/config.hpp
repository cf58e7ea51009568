#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "gxe/error.hpp"

namespace gxe {

// Sectioned key = value configuration document. '#' and ';' start comments.
// Insertion order is preserved so that dump() round-trips byte-identically.
class Ini {
 public:
  static Ini parse_file(const std::string& path);
  static Ini parse_string(const std::string& text, const std::string& origin = "<string>");

  bool has(const std::string& section, const std::string& key) const;
  std::string get(const std::string& section, const std::string& key) const;
  std::string get_or(const std::string& section, const std::string& key,
                     const std::string& fallback) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  long get_long(const std::string& section, const std::string& key, long fallback) const;
  // seeds span the full 64-bit range
  std::uint64_t get_u64(const std::string& section, const std::string& key,
                        std::uint64_t fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
  std::vector<std::string> get_list(const std::string& section, const std::string& key) const;
  std::vector<double> get_double_list(const std::string& section, const std::string& key) const;

  void set(const std::string& section, const std::string& key, const std::string& value);

  // unknown keys are rejected, per the run-configuration contract
  void require_known_keys(const std::string& section,
                          const std::set<std::string>& allowed) const;
  bool has_section(const std::string& section) const;

  std::string dump() const;
  void write_file(const std::string& path) const;

 private:
  using Section = std::pair<std::string, std::vector<std::pair<std::string, std::string>>>;
  std::vector<Section> sections_;

  const std::string* find(const std::string& section, const std::string& key) const;
};

}  // namespace gxe
