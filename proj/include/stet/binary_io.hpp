#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "stet/errors.hpp"

// Little-endian primitives for the checkpoint and raw dataset containers.
namespace stet::binary {

template <typename T>
void write(std::ostream& os, T value) {
  static_assert(std::is_arithmetic_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  os.write(bytes.data(), sizeof(T));
}

template <typename T>
T read(std::istream& is, const char* what) {
  static_assert(std::is_arithmetic_v<T>);
  std::array<char, sizeof(T)> bytes;
  if (!is.read(bytes.data(), sizeof(T))) {
    throw ParseError(std::string("unexpected end of file while reading ") + what, 0);
  }
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, const char* what) {
  const auto n = read<std::uint32_t>(is, what);
  if (n > (1u << 20)) throw ParseError(std::string("implausible string length for ") + what, 0);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) {
    throw ParseError(std::string("unexpected end of file while reading ") + what, 0);
  }
  return s;
}

}  // namespace stet::binary
