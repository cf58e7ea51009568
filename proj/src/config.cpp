#include "gxe/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace gxe {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

Ini Ini::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_string(ss.str(), path);
}

Ini Ini::parse_string(const std::string& text, const std::string& origin) {
  Ini ini;
  std::istringstream in(text);
  std::string line;
  std::string current;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ParseError(origin, line_no, "malformed section header");
      current = trim(t.substr(1, t.size() - 2));
      if (current.empty()) throw ParseError(origin, line_no, "empty section name");
      if (!ini.has_section(current)) ini.sections_.push_back({current, {}});
      continue;
    }
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ParseError(origin, line_no, "expected key = value");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty()) throw ParseError(origin, line_no, "empty key");
    if (current.empty())
      throw ParseError(origin, line_no, "key outside of any [section]");
    for (auto& [name, kvs] : ini.sections_) {
      if (name != current) continue;
      for (const auto& [k, v] : kvs)
        if (k == key) throw ParseError(origin, line_no, "duplicate key: " + key);
      kvs.emplace_back(key, value);
    }
  }
  return ini;
}

bool Ini::has_section(const std::string& section) const {
  for (const auto& [name, kvs] : sections_)
    if (name == section) return true;
  return false;
}

const std::string* Ini::find(const std::string& section, const std::string& key) const {
  for (const auto& [name, kvs] : sections_) {
    if (name != section) continue;
    for (const auto& [k, v] : kvs)
      if (k == key) return &v;
  }
  return nullptr;
}

bool Ini::has(const std::string& section, const std::string& key) const {
  return find(section, key) != nullptr;
}

std::string Ini::get(const std::string& section, const std::string& key) const {
  const std::string* v = find(section, key);
  if (!v) throw ValidationError("missing config key [" + section + "] " + key);
  return *v;
}

std::string Ini::get_or(const std::string& section, const std::string& key,
                        const std::string& fallback) const {
  const std::string* v = find(section, key);
  return v ? *v : fallback;
}

double Ini::get_double(const std::string& section, const std::string& key,
                       double fallback) const {
  const std::string* v = find(section, key);
  if (!v) return fallback;
  double out = 0.0;
  auto res = std::from_chars(v->data(), v->data() + v->size(), out);
  if (res.ec != std::errc() || res.ptr != v->data() + v->size())
    throw ValidationError("config key [" + section + "] " + key + " is not a number: " + *v);
  return out;
}

std::uint64_t Ini::get_u64(const std::string& section, const std::string& key,
                           std::uint64_t fallback) const {
  const std::string* v = find(section, key);
  if (!v) return fallback;
  std::uint64_t out = 0;
  auto res = std::from_chars(v->data(), v->data() + v->size(), out);
  if (res.ec != std::errc() || res.ptr != v->data() + v->size())
    throw ValidationError("config key [" + section + "] " + key +
                          " is not an unsigned integer: " + *v);
  return out;
}

long Ini::get_long(const std::string& section, const std::string& key, long fallback) const {
  const std::string* v = find(section, key);
  if (!v) return fallback;
  long out = 0;
  auto res = std::from_chars(v->data(), v->data() + v->size(), out);
  if (res.ec != std::errc() || res.ptr != v->data() + v->size())
    throw ValidationError("config key [" + section + "] " + key + " is not an integer: " + *v);
  return out;
}

bool Ini::get_bool(const std::string& section, const std::string& key, bool fallback) const {
  const std::string* v = find(section, key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1") return true;
  if (*v == "false" || *v == "0") return false;
  throw ValidationError("config key [" + section + "] " + key + " is not a boolean: " + *v);
}

std::vector<std::string> Ini::get_list(const std::string& section,
                                       const std::string& key) const {
  const std::string* v = find(section, key);
  std::vector<std::string> out;
  if (!v) return out;
  std::string cur;
  for (char c : *v) {
    if (c == ',') {
      const std::string t = trim(cur);
      if (!t.empty()) out.push_back(t);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  const std::string t = trim(cur);
  if (!t.empty()) out.push_back(t);
  return out;
}

std::vector<double> Ini::get_double_list(const std::string& section,
                                         const std::string& key) const {
  std::vector<double> out;
  for (const auto& s : get_list(section, key)) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
      throw ValidationError("config key [" + section + "] " + key +
                            " has a non-numeric element: " + s);
    out.push_back(v);
  }
  return out;
}

void Ini::set(const std::string& section, const std::string& key, const std::string& value) {
  for (auto& [name, kvs] : sections_) {
    if (name != section) continue;
    for (auto& [k, v] : kvs) {
      if (k == key) {
        v = value;
        return;
      }
    }
    kvs.emplace_back(key, value);
    return;
  }
  sections_.push_back({section, {{key, value}}});
}

void Ini::require_known_keys(const std::string& section,
                             const std::set<std::string>& allowed) const {
  for (const auto& [name, kvs] : sections_) {
    if (name != section) continue;
    for (const auto& [k, v] : kvs)
      if (!allowed.count(k))
        throw ValidationError("unknown config key [" + section + "] " + k);
  }
}

std::string Ini::dump() const {
  std::string out;
  for (const auto& [name, kvs] : sections_) {
    out += "[" + name + "]\n";
    for (const auto& [k, v] : kvs) out += k + " = " + v + "\n";
  }
  return out;
}

void Ini::write_file(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write config file: " + path);
  out << dump();
}

}  // namespace gxe
