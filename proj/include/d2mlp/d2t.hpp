// Copyright 2026 The d2mlp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "d2mlp/tensor.hpp"

// .d2t layout (all integers little-endian):
//   "D2T\0"  u8 dtype (0=f32, 1=f64, 2=u8)  u8 rank  rank x u32 extents  payload

namespace d2mlp {

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) {
    return DType::f32;
  } else if constexpr (std::is_same_v<T, double>) {
    return DType::f64;
  } else {
    static_assert(std::is_same_v<T, std::uint8_t>, "unsupported tensor element type");
    return DType::u8;
  }
}

using AnyTensor = std::variant<Tensor<float>, Tensor<double>, Tensor<std::uint8_t>>;

namespace io {

inline constexpr std::array<char, 4> kTensorMagic = {'D', '2', 'T', '\0'};

template <class U>
void write_le(std::ostream& os, U value) {
  static_assert(std::is_trivially_copyable_v<U>);
  std::array<char, sizeof(U)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(bytes.data(), bytes.size());
}

template <class U>
U read_le(std::istream& is) {
  std::array<char, sizeof(U)> bytes;
  if (!is.read(bytes.data(), bytes.size())) throw FormatError("unexpected end of stream");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  U value;
  std::memcpy(&value, bytes.data(), sizeof(U));
  return value;
}

inline void write_bytes(std::ostream& os, const void* data, std::size_t n) {
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

}  // namespace io

template <class T>
void write_d2t(std::ostream& os, const Tensor<T>& t) {
  if (t.rank() > 255) throw ShapeError("rank too large for .d2t");
  io::write_bytes(os, io::kTensorMagic.data(), io::kTensorMagic.size());
  io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
  io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t e : t.shape()) {
    if (e > UINT32_MAX) throw ShapeError("extent too large for .d2t");
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  }
  if constexpr (std::endian::native == std::endian::little) {
    io::write_bytes(os, t.raw(), t.size() * sizeof(T));
  } else {
    for (T v : t.data()) io::write_le<T>(os, v);
  }
  if (!os) throw FormatError("write failed");
}

namespace detail {
template <class T>
Tensor<T> read_payload(std::istream& is, Shape shape) {
  Tensor<T> t(std::move(shape));
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(t.raw()), static_cast<std::streamsize>(t.size() * sizeof(T)))) {
      throw FormatError(".d2t payload truncated");
    }
  } else {
    for (auto& v : t.data()) v = io::read_le<T>(is);
  }
  return t;
}
}  // namespace detail

inline AnyTensor read_d2t(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != io::kTensorMagic) {
    throw FormatError("not a .d2t tensor (bad magic)");
  }
  const auto code = io::read_le<std::uint8_t>(is);
  const auto rank = io::read_le<std::uint8_t>(is);
  if (rank == 0) throw FormatError(".d2t rank must be positive");
  Shape shape(rank);
  for (auto& e : shape) {
    e = io::read_le<std::uint32_t>(is);
    if (e == 0) throw FormatError(".d2t extents must be positive");
  }
  switch (static_cast<DType>(code)) {
    case DType::f32:
      return detail::read_payload<float>(is, std::move(shape));
    case DType::f64:
      return detail::read_payload<double>(is, std::move(shape));
    case DType::u8:
      return detail::read_payload<std::uint8_t>(is, std::move(shape));
  }
  throw FormatError(".d2t unknown dtype code " + std::to_string(code));
}

/// Reads a tensor that must have element type T.
template <class T>
Tensor<T> read_d2t_as(std::istream& is) {
  AnyTensor any = read_d2t(is);
  if (auto* t = std::get_if<Tensor<T>>(&any)) return std::move(*t);
  throw FormatError(".d2t dtype mismatch");
}

template <class T>
void save_d2t(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_d2t(os, t);
}

inline AnyTensor load_d2t(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_d2t(is);
}

template <class T>
Tensor<T> load_d2t_as(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_d2t_as<T>(is);
}

}  // namespace d2mlp
