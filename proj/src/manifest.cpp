#include "gxe/manifest.hpp"

#include <fstream>

#include "gxe/csv.hpp"
#include "gxe/error.hpp"

namespace gxe {

std::uint64_t hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot hash missing file: " + path);
  std::uint64_t h = 1469598103934665603ull;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    const std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  return h;
}

void Manifest::record(const std::string& path, const std::string& role) {
  entries_.push_back({path, role, hash_file(path)});
}

void Manifest::write(const std::string& path) const {
  CsvWriter w(path);
  w.write_row({"path", "role", "fnv1a64"});
  char buf[32];
  for (const auto& e : entries_) {
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(e.hash));
    w.write_row({e.path, e.role, buf});
  }
}

}  // namespace gxe
