#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>

namespace cal {

// Little-endian framed reader/writer. The reader tracks its byte offset and
// reports it on truncation or corruption so broken files are diagnosable.

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}

  void magic(const char tag[4]) { raw(tag, 4); }
  void u8(std::uint8_t v) { raw(&v, 1); }

  void u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    raw(b, 8);
  }

  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }

  void raw(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out_) throw std::runtime_error("write failed");
  }

 private:
  std::ostream& out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::istream& in) : in_(in) {}

  std::size_t offset() const { return offset_; }

  void expect_magic(const char tag[4], const std::string& what) {
    char buf[4];
    raw(buf, 4, what + " magic");
    if (std::memcmp(buf, tag, 4) != 0) {
      throw std::runtime_error(what + ": bad magic at byte 0 (expected \"" + std::string(tag, 4) +
                               "\")");
    }
  }

  std::uint8_t u8(const std::string& what) {
    std::uint8_t v;
    raw(&v, 1, what);
    return v;
  }

  std::uint64_t u64(const std::string& what) {
    unsigned char b[8];
    raw(b, 8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }

  std::int64_t i64(const std::string& what) { return static_cast<std::int64_t>(u64(what)); }
  double f64(const std::string& what) { return std::bit_cast<double>(u64(what)); }

  std::string str(const std::string& what) {
    std::uint64_t n = u64(what + " length");
    std::string s(n, '\0');
    raw(s.data(), n, what);
    return s;
  }

  void raw(void* data, std::size_t n, const std::string& what) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw std::runtime_error("truncated file: expected " + std::to_string(n) + " bytes for " +
                               what + " at byte " + std::to_string(offset_));
    }
    offset_ += n;
  }

 private:
  std::istream& in_;
  std::size_t offset_ = 0;
};

inline std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  return out;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  return in;
}

}  // namespace cal
