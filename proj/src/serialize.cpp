#include "prefixq/serialize.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "prefixq/errors.hpp"

namespace prefixq::io {

static_assert(std::endian::native == std::endian::little, "container format assumes a little-endian host");

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Writer::Writer(std::string_view magic, std::uint32_t version) {
  buf_.append(magic);
  u32(version);
}

void Writer::raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
void Writer::u32(std::uint32_t v) { raw(&v, sizeof v); }
void Writer::u64(std::uint64_t v) { raw(&v, sizeof v); }
void Writer::i32(std::int32_t v) { raw(&v, sizeof v); }
void Writer::f64(double v) { raw(&v, sizeof v); }

void Writer::str(std::string_view s) {
  u64(s.size());
  raw(s.data(), s.size());
}

void Writer::matrix(const Matrix& m) {
  u64(static_cast<std::uint64_t>(m.rows()));
  u64(static_cast<std::uint64_t>(m.cols()));
  raw(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
}

void Writer::row(const Eigen::RowVectorXd& r) {
  u64(static_cast<std::uint64_t>(r.size()));
  raw(r.data(), sizeof(double) * static_cast<std::size_t>(r.size()));
}

std::string Writer::finish() const {
  std::string out = buf_;
  const std::uint64_t sum = fnv1a(out);
  out.append(reinterpret_cast<const char*>(&sum), sizeof sum);
  return out;
}

void Writer::save(const std::string& path) const {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    const std::string bytes = finish();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to '" + path + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot move '" + tmp + "' to '" + path + "'");
}

Reader::Reader(std::string bytes, std::string_view magic, std::uint32_t version, std::string what)
    : buf_(std::move(bytes)), what_(std::move(what)) {
  const std::size_t header = magic.size() + sizeof(std::uint32_t);
  if (buf_.size() < magic.size() || std::string_view(buf_).substr(0, magic.size()) != magic) {
    throw CorruptFile(what_ + ": bad magic, not a " + what_ + " file");
  }
  if (buf_.size() < header + sizeof(std::uint64_t)) throw CorruptFile(what_ + ": file is truncated");
  end_ = buf_.size() - sizeof(std::uint64_t);
  std::uint64_t stored = 0;
  std::memcpy(&stored, buf_.data() + end_, sizeof stored);
  if (fnv1a(std::string_view(buf_).substr(0, end_)) != stored) {
    throw CorruptFile(what_ + ": checksum mismatch (truncated or corrupted file)");
  }
  pos_ = magic.size();
  const std::uint32_t found = u32();
  if (found != version) {
    throw VersionMismatch(what_ + ": format version " + std::to_string(found) + ", expected " +
                          std::to_string(version));
  }
}

Reader Reader::open(const std::string& path, std::string_view magic, std::uint32_t version, std::string what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return Reader(ss.str(), magic, version, std::move(what));
}

void Reader::raw(void* p, std::size_t n) {
  if (n > end_ - pos_) throw CorruptFile(what_ + ": unexpected end of payload");
  std::memcpy(p, buf_.data() + pos_, n);
  pos_ += n;
}

std::uint32_t Reader::u32() {
  std::uint32_t v;
  raw(&v, sizeof v);
  return v;
}

std::uint64_t Reader::u64() {
  std::uint64_t v;
  raw(&v, sizeof v);
  return v;
}

std::int32_t Reader::i32() {
  std::int32_t v;
  raw(&v, sizeof v);
  return v;
}

double Reader::f64() {
  double v;
  raw(&v, sizeof v);
  return v;
}

std::string Reader::str() {
  const std::uint64_t n = u64();
  if (n > end_ - pos_) throw CorruptFile(what_ + ": string length exceeds payload");
  std::string s(buf_.data() + pos_, n);
  pos_ += n;
  return s;
}

Matrix Reader::matrix() {
  const std::uint64_t r = u64();
  const std::uint64_t c = u64();
  if (r != 0 && c > (end_ - pos_) / sizeof(double) / r) throw CorruptFile(what_ + ": array size exceeds payload");
  Matrix m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  raw(m.data(), sizeof(double) * r * c);
  return m;
}

Eigen::RowVectorXd Reader::row() {
  const std::uint64_t n = u64();
  if (n > (end_ - pos_) / sizeof(double)) throw CorruptFile(what_ + ": vector size exceeds payload");
  Eigen::RowVectorXd v(static_cast<Eigen::Index>(n));
  raw(v.data(), sizeof(double) * n);
  return v;
}

void Reader::expect_end() const {
  if (pos_ != end_) throw CorruptFile(what_ + ": trailing bytes after payload");
}

}  // namespace prefixq::io
