#pragma once

// Little-endian binary container helpers shared by dataset and checkpoint
// files. Layout: 8-byte magic, u32 version, payload, u64 FNV-1a checksum of
// everything before it.

#include <cstdint>
#include <string>
#include <string_view>

#include "prefixq/tensor.hpp"

namespace prefixq::io {

std::uint64_t fnv1a(std::string_view bytes);

class Writer {
 public:
  Writer(std::string_view magic, std::uint32_t version);

  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i32(std::int32_t v);
  void f64(double v);
  void str(std::string_view s);
  void matrix(const Matrix& m);
  void row(const Eigen::RowVectorXd& r);

  // Appends the checksum and writes atomically via a temporary file.
  void save(const std::string& path) const;
  std::string finish() const;

 private:
  void raw(const void* p, std::size_t n);
  std::string buf_;
};

class Reader {
 public:
  // Validates magic, checksum and version. `what` names the file kind in
  // error messages.
  Reader(std::string bytes, std::string_view magic, std::uint32_t version, std::string what);
  static Reader open(const std::string& path, std::string_view magic, std::uint32_t version, std::string what);

  std::uint32_t u32();
  std::uint64_t u64();
  std::int32_t i32();
  double f64();
  std::string str();
  Matrix matrix();
  Eigen::RowVectorXd row();

  // Throws if unread payload remains.
  void expect_end() const;

 private:
  void raw(void* p, std::size_t n);
  std::string buf_;
  std::size_t pos_ = 0;
  std::size_t end_ = 0;
  std::string what_;
};

}  // namespace prefixq::io
