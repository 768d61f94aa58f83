#pragma once

// Little-endian primitives shared by the checkpoint formats.

#include <array>
#include <cmath>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dgp/errors.hpp"
#include "dgp/linalg.hpp"

namespace dgp::io {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = char((v >> (8 * i)) & 0xFF);
  os.write(b.data(), 8);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = char((v >> (8 * i)) & 0xFF);
  os.write(b.data(), 4);
}

inline void put_i32(std::ostream& os, std::int32_t v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline std::uint64_t get_u64(std::istream& is) {
  std::array<unsigned char, 8> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 8)) throw FormatError("unexpected end of file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return v;
}

inline std::uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw FormatError("unexpected end of file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
  return v;
}

inline std::int32_t get_i32(std::istream& is) { return std::bit_cast<std::int32_t>(get_u32(is)); }
inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

inline void put_vec(std::ostream& os, const std::vector<double>& v) {
  put_u64(os, v.size());
  for (double x : v) put_f64(os, x);
}

inline std::vector<double> get_vec(std::istream& is, std::uint64_t max_len = 1ULL << 32) {
  const std::uint64_t n = get_u64(is);
  if (n > max_len) throw FormatError("vector length " + std::to_string(n) + " exceeds limit");
  std::vector<double> v(n);
  for (auto& x : v) x = get_f64(is);
  return v;
}

inline void put_matrix(std::ostream& os, const DenseMatrix& m) {
  put_u64(os, m.rows());
  put_u64(os, m.cols());
  for (double x : m.values()) put_f64(os, x);
}

inline DenseMatrix get_matrix(std::istream& is) {
  const std::uint64_t rows = get_u64(is);
  const std::uint64_t cols = get_u64(is);
  if (rows > (1ULL << 24) || cols > (1ULL << 24) || rows * cols > (1ULL << 30))
    throw FormatError("matrix header " + std::to_string(rows) + "x" + std::to_string(cols) + " is implausible");
  std::vector<double> data(rows * cols);
  for (auto& x : data) x = get_f64(is);
  for (double x : data)
    if (!std::isfinite(x)) throw FormatError("non-finite matrix payload");
  return DenseMatrix(rows, cols, std::move(data));
}

inline void put_magic(std::ostream& os, const char (&magic)[5], std::uint32_t version) {
  os.write(magic, 4);
  put_u32(os, version);
}

inline std::uint32_t expect_magic(std::istream& is, const char (&magic)[5], std::uint32_t supported) {
  std::array<char, 4> b{};
  if (!is.read(b.data(), 4) || std::memcmp(b.data(), magic, 4) != 0)
    throw FormatError(std::string("bad magic, expected \"") + magic + "\"");
  const std::uint32_t version = get_u32(is);
  if (version != supported)
    throw FormatError(std::string(magic) + " format version " + std::to_string(version) + " unsupported (reader is v" +
                      std::to_string(supported) + ")");
  return version;
}

/// Writes to a sibling temporary file, then renames over the target.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
    f.write(bytes.data(), std::streamsize(bytes.size()));
    if (!f) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace dgp::io
