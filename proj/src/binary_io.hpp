#pragma once

// Little-endian primitive I/O shared by the slide and checkpoint formats.

#include "abx/error.hpp"
#include "abx/tensor.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

namespace abx::detail {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError(std::string("truncated file while reading ") + what);
  return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, const char* what) {
  const auto n = get<std::uint32_t>(is, what);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw IoError(std::string("truncated file while reading ") + what);
  return s;
}

// Row-major f64 payload.
inline void put_matrix(std::ostream& os, const Matrix& m) {
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) put<double>(os, m(r, c));
}

inline Matrix get_matrix(std::istream& is, Index rows, Index cols, const char* what) {
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = get<double>(is, what);
  return m;
}

inline void expect_magic(std::istream& is, const char (&magic)[5], const std::string& path) {
  char buf[4];
  is.read(buf, 4);
  if (!is || std::memcmp(buf, magic, 4) != 0) {
    throw IoError(path + ": bad magic, expected " + std::string(magic, 4));
  }
}

}  // namespace abx::detail
