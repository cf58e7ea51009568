#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace gxe {

std::uint64_t hash_file(const std::string& path);

// Run manifest: every file a run reads or writes, with a content hash.
class Manifest {
 public:
  void record_read(const std::string& path) { record(path, "read"); }
  void record_write(const std::string& path) { record(path, "write"); }
  void write(const std::string& path) const;

 private:
  void record(const std::string& path, const std::string& role);
  struct Entry {
    std::string path;
    std::string role;
    std::uint64_t hash;
  };
  std::vector<Entry> entries_;
};

}  // namespace gxe
