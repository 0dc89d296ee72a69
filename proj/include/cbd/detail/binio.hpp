#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>

#include "cbd/errors.hpp"

namespace cbd::detail {

// Little-endian serialization helpers shared by the binary file formats.

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_f32(std::string& out, const float* v, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    const std::size_t off = out.size();
    out.resize(off + n * 4);
    std::memcpy(out.data() + off, v, n * 4);
  } else {
    for (std::size_t i = 0; i < n; ++i) put_u32(out, std::bit_cast<std::uint32_t>(v[i]));
  }
}

struct Reader {
  const std::string& buf;
  const char* what;  // file kind for error messages
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw FormatError(std::string(what) + ": truncated file");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  std::uint16_t u16() {
    need(2);
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
    pos += 2;
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }
  std::uint32_t u32() {
    need(4);
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
    pos += 4;
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
  void f32(float* dst, std::size_t n) {
    need(n * 4);
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(dst, buf.data() + pos, n * 4);
      pos += n * 4;
    } else {
      for (std::size_t i = 0; i < n; ++i) dst[i] = std::bit_cast<float>(u32());
    }
  }
};

}  // namespace cbd::detail
