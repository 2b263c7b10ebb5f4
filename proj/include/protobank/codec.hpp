#pragma once

#include <algorithm>
#include <atomic>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include <unistd.h>

#include "protobank/error.hpp"
#include "protobank/numerics/tensor.hpp"

namespace protobank {

using Bytes = std::vector<std::uint8_t>;

inline std::uint64_t fnv1a64(const std::uint8_t* p, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) h = (h ^ p[i]) * 0x100000001b3ULL;
  return h;
}

// Little-endian writer.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
  void raw(const Bytes& b) { out_.insert(out_.end(), b.begin(), b.end()); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  void tensor(const Tensor& t) {
    u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape) u64(d);
    for (double v : t.data) f64(v);
  }
  // Appends the checksum of everything written so far.
  void seal() { u64(fnv1a64(out_.data(), out_.size())); }

  const Bytes& bytes() const& { return out_; }
  Bytes bytes() && { return std::move(out_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  Bytes out_;
};

class ByteReader {
 public:
  explicit ByteReader(const Bytes& b, std::size_t begin = 0, std::size_t end = SIZE_MAX)
      : b_(b), pos_(begin), end_(std::min(end, b.size())) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::string str(std::size_t max_len = 1 << 20) {
    const std::uint32_t n = u32();
    if (n > max_len) throw FormatError("string length " + std::to_string(n) + " exceeds limit");
    return raw(n);
  }
  Tensor tensor() {
    const std::uint32_t rank = u32();
    if (rank > 8) throw FormatError("tensor rank " + std::to_string(rank) + " unsupported");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(u64());
      if (d != 0 && n > remaining() / d) throw FormatError("truncated stream: tensor larger than input");
      n *= d;
    }
    if (n > remaining() / 8) throw FormatError("truncated stream: tensor larger than input");
    Tensor t(std::move(shape));
    for (double& v : t.data) v = f64();
    return t;
  }
  // Validates the trailing checksum over [start, pos) and that nothing follows it.
  void expect_seal(std::size_t start) {
    const std::size_t body_end = pos_;
    const std::uint64_t want = u64();
    if (fnv1a64(b_.data() + start, body_end - start) != want) throw FormatError("checksum mismatch");
    if (pos_ != end_) throw FormatError("trailing bytes after checksum");
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return end_ - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > remaining()) throw FormatError("truncated stream");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const Bytes& b_;
  std::size_t pos_;
  std::size_t end_;
};

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Write-to-temp then rename, so readers never observe a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const Bytes& bytes) {
  static std::atomic<unsigned long> counter{0};
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string peek_magic(const Bytes& b) {
  if (b.size() < 8) throw FormatError("truncated stream: no magic");
  return std::string(b.begin(), b.begin() + 8);
}

}  // namespace protobank
