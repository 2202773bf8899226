#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mavt/tensor.hpp"

namespace mavt {

// Named-tensor container backing checkpoints and sample files.
struct Record {
  struct Entry {
    std::string name;
    Tensor tensor;
  };
  std::vector<Entry> entries;

  void add(std::string name, Tensor t);
  const Tensor* find(const std::string& name) const;
  Tensor require(const std::string& name) const;  // FormatError when missing
  std::vector<const Entry*> with_prefix(const std::string& prefix) const;
};

// Binary layout: magic "MAVT", version u32, tensor count u32, then per tensor
// name length u32 + UTF-8 bytes, rank u32, dims u32 each, payload as
// little-endian 64-bit reals. Bit-exact round-trip.
inline constexpr std::uint32_t kRecordVersion = 1;

void write_record(std::ostream& os, const Record& rec);
Record read_record(std::istream& is, bool expect_eof = true);
void save_record(const std::string& path, const Record& rec);
Record load_record(const std::string& path);

// FNV-1a, 64-bit.
std::uint64_t fnv1a64(const void* bytes, std::size_t n,
                      std::uint64_t h = 0xcbf29ce484222325ull);

// Checksum over all entries whose name starts with `prefix`, iterated in
// sorted-name order; covers names, shapes, and payload bytes.
std::uint64_t record_checksum(const Record& rec, const std::string& prefix);

std::string hex64(std::uint64_t v);

}  // namespace mavt
