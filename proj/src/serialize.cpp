#include "mavt/serialize.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mavt {

namespace {

constexpr char kMagic[4] = {'M', 'A', 'V', 'T'};
constexpr std::uint32_t kMaxNameLen = 1u << 20;
constexpr std::uint32_t kMaxRank = 16;

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw FormatError(std::string("record truncated while reading ") + what);
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f64(std::ostream& os, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8))
    throw FormatError("record truncated while reading tensor payload");
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

}  // namespace

void Record::add(std::string name, Tensor t) {
  if (!t.defined()) throw ContractError("Record::add: undefined tensor");
  if (find(name)) throw ContractError("Record::add: duplicate name " + name);
  entries.push_back({std::move(name), std::move(t)});
}

const Tensor* Record::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e.tensor;
  return nullptr;
}

Tensor Record::require(const std::string& name) const {
  const Tensor* t = find(name);
  if (!t) throw FormatError("record is missing tensor \"" + name + "\"");
  return *t;
}

std::vector<const Record::Entry*> Record::with_prefix(
    const std::string& prefix) const {
  std::vector<const Entry*> out;
  for (const auto& e : entries)
    if (e.name.rfind(prefix, 0) == 0) out.push_back(&e);
  return out;
}

void write_record(std::ostream& os, const Record& rec) {
  os.write(kMagic, 4);
  put_u32(os, kRecordVersion);
  put_u32(os, static_cast<std::uint32_t>(rec.entries.size()));
  for (const auto& e : rec.entries) {
    put_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    const Shape& s = e.tensor.shape();
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    for (int d : s) put_u32(os, static_cast<std::uint32_t>(d));
    for (double v : e.tensor.data()) put_f64(os, v);
  }
  if (!os) throw FormatError("failed to write record stream");
}

Record read_record(std::istream& is, bool expect_eof) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("bad magic: not a MAVT record");
  std::uint32_t version = get_u32(is, "version");
  if (version != kRecordVersion)
    throw FormatError("unsupported record version " + std::to_string(version));
  std::uint32_t count = get_u32(is, "tensor count");
  Record rec;
  for (std::uint32_t t = 0; t < count; ++t) {
    std::uint32_t name_len = get_u32(is, "name length");
    if (name_len == 0 || name_len > kMaxNameLen)
      throw FormatError("implausible tensor name length " +
                        std::to_string(name_len));
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len))
      throw FormatError("record truncated while reading tensor name");
    std::uint32_t rank = get_u32(is, "rank");
    if (rank > kMaxRank)
      throw FormatError("implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      std::uint32_t d = get_u32(is, "dim");
      if (d == 0 || d > (1u << 28))
        throw FormatError("implausible tensor dimension " + std::to_string(d));
      shape[i] = static_cast<int>(d);
      numel *= d;
      if (numel > (1ull << 32))
        throw FormatError("tensor payload too large");
    }
    std::vector<double> data(numel);
    for (std::size_t i = 0; i < numel; ++i) data[i] = get_f64(is);
    rec.add(std::move(name), Tensor::from(std::move(shape), std::move(data)));
  }
  if (expect_eof && is.peek() != std::char_traits<char>::eof())
    throw FormatError("trailing bytes after record");
  return rec;
}

void save_record(const std::string& path, const Record& rec) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path + " for writing");
  write_record(f, rec);
  if (!f) throw FormatError("failed writing " + path);
}

Record load_record(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  return read_record(f);
}

std::uint64_t fnv1a64(const void* bytes, std::size_t n, std::uint64_t h) {
  const unsigned char* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t record_checksum(const Record& rec, const std::string& prefix) {
  auto sel = rec.with_prefix(prefix);
  std::sort(sel.begin(), sel.end(),
            [](const Record::Entry* a, const Record::Entry* b) {
              return a->name < b->name;
            });
  std::uint64_t h = 0xcbf29ce484222325ull;
  const char nul = '\0';
  for (const Record::Entry* e : sel) {
    h = fnv1a64(e->name.data(), e->name.size(), h);
    h = fnv1a64(&nul, 1, h);
    for (int d : e->tensor.shape()) {
      std::uint32_t u = static_cast<std::uint32_t>(d);
      h = fnv1a64(&u, 4, h);
    }
    auto data = e->tensor.data();
    for (double v : data) {
      std::uint64_t u;
      std::memcpy(&u, &v, 8);
      unsigned char b[8];
      for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
      h = fnv1a64(b, 8, h);
    }
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace mavt
