#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

#include "cirm/error.hpp"

namespace cirm {

static_assert(std::endian::native == std::endian::little,
              "binary artifact formats are little-endian; big-endian hosts are unsupported");

// Little-endian byte buffer writer for binary artifacts.
class ByteWriter {
public:
  void u8(uint8_t v) { buf_.push_back(static_cast<char>(v)); }

  void u32(uint32_t v) { append(&v, sizeof(v)); }
  void u64(uint64_t v) { append(&v, sizeof(v)); }
  void i64(int64_t v) { append(&v, sizeof(v)); }

  void f64(double v) {
    uint64_t bits = std::bit_cast<uint64_t>(v);
    append(&bits, sizeof(bits));
  }

  void bytes(const void* data, size_t n) { append(data, n); }
  void bytes(std::string_view s) { append(s.data(), s.size()); }

  const std::string& data() const { return buf_; }
  std::string take() { return std::move(buf_); }

private:
  void append(const void* p, size_t n) {
    const char* c = static_cast<const char*>(p);
    buf_.append(c, n);
  }

  std::string buf_;
};

// Matching reader; throws on truncation so corrupt files never parse quietly.
class ByteReader {
public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  uint8_t u8() { return static_cast<uint8_t>(take(1)[0]); }

  uint32_t u32() {
    uint32_t v;
    std::memcpy(&v, take(sizeof(v)).data(), sizeof(v));
    return v;
  }

  uint64_t u64() {
    uint64_t v;
    std::memcpy(&v, take(sizeof(v)).data(), sizeof(v));
    return v;
  }

  int64_t i64() {
    int64_t v;
    std::memcpy(&v, take(sizeof(v)).data(), sizeof(v));
    return v;
  }

  double f64() { return std::bit_cast<double>(u64()); }

  std::string_view bytes(size_t n) { return take(n); }

  size_t pos() const { return pos_; }
  size_t remaining() const { return data_.size() - pos_; }
  bool at_end() const { return pos_ == data_.size(); }

private:
  std::string_view take(size_t n) {
    if (pos_ + n > data_.size())
      throw Error("truncated", "binary data truncated: need " + std::to_string(n) +
                                   " bytes at offset " + std::to_string(pos_) + ", have " +
                                   std::to_string(data_.size() - pos_));
    std::string_view v = data_.substr(pos_, n);
    pos_ += n;
    return v;
  }

  std::string_view data_;
  size_t pos_ = 0;
};

// Whole-file helpers (binary-safe).
std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);
bool file_exists(const std::string& path);

// Shortest decimal string that parses back to exactly the same double; the
// one formatting used in all CSV output so files are byte-stable.
std::string format_double(double v);

}  // namespace cirm
