#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "farspk/common.h"

namespace farspk::detail {

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_integral_v<T>);
  std::array<char, sizeof(T)> bytes{};
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bytes[i] = static_cast<char>((static_cast<uint64_t>(value) >> (8 * i)) & 0xff);
  }
  out.write(bytes.data(), bytes.size());
}

template <typename T>
T get_le(std::istream& in) {
  static_assert(std::is_integral_v<T>);
  std::array<unsigned char, sizeof(T)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!in) {
    throw DataError("truncated binary input");
  }
  uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<uint64_t>(bytes[i]) << (8 * i);
  }
  return static_cast<T>(v);
}

inline void put_f32(std::ostream& out, double value) {
  put_le<uint32_t>(out, std::bit_cast<uint32_t>(static_cast<float>(value)));
}

inline double get_f32(std::istream& in) {
  return static_cast<double>(std::bit_cast<float>(get_le<uint32_t>(in)));
}

inline void put_id(std::ostream& out, const std::string& id) {
  if (id.size() > 0xffff) {
    throw DataError("id too long: " + id.substr(0, 32) + "...");
  }
  put_le<uint16_t>(out, static_cast<uint16_t>(id.size()));
  out.write(id.data(), static_cast<std::streamsize>(id.size()));
}

inline std::string get_id(std::istream& in) {
  const auto len = get_le<uint16_t>(in);
  std::string id(len, '\0');
  in.read(id.data(), len);
  if (!in) {
    throw DataError("truncated id");
  }
  return id;
}

inline void expect_magic(std::istream& in, const char (&magic)[5],
                         const std::string& what) {
  char got[4];
  in.read(got, 4);
  if (!in || std::memcmp(got, magic, 4) != 0) {
    throw DataError(what + ": bad magic, expected " + std::string(magic, 4));
  }
}

}  // namespace farspk::detail
