#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "exmap/common.hpp"

namespace exmap {

/// Little-endian binary container writer used by every *.bin artifact.
class BinWriter {
 public:
  explicit BinWriter(const std::string& path)
      : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw Error("io-error", "cannot open for writing: " + path);
  }

  void bytes(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  }
  void magic(const char tag[5]) { bytes(tag, 4); }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f32(float v) { bytes(&v, 4); }
  void f64(double v) { bytes(&v, 8); }

  template <typename Derived>
  void matrix_f64(const Eigen::MatrixBase<Derived>& m) {  // row-major
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) f64(static_cast<double>(m(i, j)));
  }
  template <typename Derived>
  void matrix_f32(const Eigen::MatrixBase<Derived>& m) {  // row-major
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) f32(static_cast<float>(m(i, j)));
  }
  template <typename Derived>
  void matrix_u32(const Eigen::MatrixBase<Derived>& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) u32(static_cast<std::uint32_t>(m(i, j)));
  }

  void close() {
    out_.flush();
    if (!out_) throw Error("io-error", "write failed: " + path_);
    out_.close();
  }

 private:
  std::string path_;
  std::ofstream out_;
};

/// Reader counterpart. `expect_magic` distinguishes a wrong file from a
/// wrong version of the right file family (same 3-letter prefix).
class BinReader {
 public:
  explicit BinReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw Error("io-error", "cannot open: " + path);
  }

  void bytes(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (in_.gcount() != static_cast<std::streamsize>(n))
      throw Error("io-error", "truncated file: " + path_);
  }

  void expect_magic(const char tag[5]) {
    char got[4];
    bytes(got, 4);
    if (std::memcmp(got, tag, 4) == 0) return;
    if (std::memcmp(got, tag, 3) == 0)
      throw Error("version-mismatch", std::string("unsupported ") + std::string(tag, 3) +
                                          " format version '" + got[3] + "' in " + path_);
    throw Error("bad-magic", "not a " + std::string(tag, 4) + " file: " + path_);
  }

  std::uint8_t u8() { std::uint8_t v; bytes(&v, 1); return v; }
  std::uint32_t u32() { std::uint32_t v; bytes(&v, 4); return v; }
  std::uint64_t u64() { std::uint64_t v; bytes(&v, 8); return v; }
  float f32() { float v; bytes(&v, 4); return v; }
  double f64() { double v; bytes(&v, 8); return v; }

  template <typename Derived>
  void matrix_f64(Eigen::MatrixBase<Derived>& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = f64();
  }
  template <typename Derived>
  void matrix_f32_into(Eigen::MatrixBase<Derived>& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        m(i, j) = static_cast<typename Derived::Scalar>(f32());
  }
  template <typename Derived>
  void matrix_u32_into(Eigen::MatrixBase<Derived>& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        m(i, j) = static_cast<typename Derived::Scalar>(u32());
  }

  /// Call after the last field; surplus bytes mean the file is from a
  /// different layout and silently ignoring them would hide that.
  void expect_eof() {
    char c;
    in_.read(&c, 1);
    if (!in_.eof()) throw Error("io-error", "trailing bytes in " + path_);
  }

 private:
  std::string path_;
  std::ifstream in_;
};

}  // namespace exmap
