#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "pcan/errors.hpp"

namespace pcan {

// Little-endian primitives, explicit byte order regardless of host.

inline void write_u8(std::ostream& os, std::uint8_t v) {
  os.put(static_cast<char>(v));
}

inline void write_u32_le(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

inline void write_u64_le(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

inline void write_f64_le(std::ostream& os, double v) {
  write_u64_le(os, std::bit_cast<std::uint64_t>(v));
}

inline void write_f32_le(std::ostream& os, float v) {
  write_u32_le(os, std::bit_cast<std::uint32_t>(v));
}

inline std::uint8_t read_u8(std::istream& is, const char* what) {
  int c = is.get();
  if (c == std::istream::traits_type::eof()) {
    throw FormatError(std::string("unexpected end of file reading ") + what);
  }
  return static_cast<std::uint8_t>(c);
}

inline std::uint32_t read_u32_le(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw FormatError(std::string("unexpected end of file reading ") + what);
  }
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t read_u64_le(std::istream& is, const char* what) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) {
    throw FormatError(std::string("unexpected end of file reading ") + what);
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double read_f64_le(std::istream& is, const char* what) {
  return std::bit_cast<double>(read_u64_le(is, what));
}

inline float read_f32_le(std::istream& is, const char* what) {
  return std::bit_cast<float>(read_u32_le(is, what));
}

}  // namespace pcan
