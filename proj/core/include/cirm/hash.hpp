#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

#include "cirm/error.hpp"

namespace cirm {

// FNV-1a 64-bit. Used for artifact checksums and content hashes everywhere;
// one algorithm so independent implementations can be cross-checked easily.
inline constexpr uint64_t kFnvOffset = 14695981039346656037ull;
inline constexpr uint64_t kFnvPrime = 1099511628211ull;

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = kFnvOffset) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= static_cast<uint64_t>(p[i]);
    h *= kFnvPrime;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = kFnvOffset) {
  return fnv1a64(s.data(), s.size(), h);
}

// 64-bit values cross JSON boundaries as hex strings ("0x" + 16 lowercase
// digits) because JSON numbers cannot hold a full u64 exactly.
inline std::string hex_u64(uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "0x%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

inline uint64_t parse_hex_u64(std::string_view s) {
  if (s.size() != 18 || s[0] != '0' || s[1] != 'x')
    throw Error("bad_hash", "expected 0x-prefixed 16-digit hex string, got '" + std::string(s) + "'");
  uint64_t v = 0;
  for (size_t i = 2; i < s.size(); ++i) {
    char c = s[i];
    uint64_t d;
    if (c >= '0' && c <= '9') d = static_cast<uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f') d = static_cast<uint64_t>(c - 'a' + 10);
    else throw Error("bad_hash", "invalid hex digit in '" + std::string(s) + "'");
    v = (v << 4) | d;
  }
  return v;
}

}  // namespace cirm
