#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "prefixq/errors.hpp"
#include "prefixq/serialize.hpp"
#include "prefixq/tensor.hpp"

namespace prefixq {
namespace {

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(a.bits(), b.bits());
    EXPECT_EQ(a.normal(), b.normal());
  }
}

TEST(Rng, StateRoundTripMidPair) {
  Rng a(7);
  a.normal();  // leaves a cached spare
  Rng b;
  b.set_state(a.state());
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.normal(), b.normal());
}

TEST(Rng, UniformRangeAndMoments) {
  Rng rng(3);
  double sum = 0.0, sq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    const double z = rng.normal();
    sum += z;
    sq += z * z;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.01);
  EXPECT_NEAR(sq / n, 1.0, 0.02);
}

TEST(Rng, DerivedSeedsDiffer) {
  EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
  EXPECT_NE(derive_seed(1, 0), derive_seed(2, 0));
}

TEST(NamedTensors, OrderedByName) {
  NamedTensors t;
  t.add("b", Matrix::Ones(1, 1));
  t.add("a", Matrix::Ones(2, 1));
  EXPECT_EQ(t.names(), (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(t.scalar_count(), 3u);
}

TEST(NamedTensors, RejectsDuplicatesAndNonFinite) {
  NamedTensors t;
  t.add("a", Matrix::Zero(1, 2));
  EXPECT_THROW(t.add("a", Matrix::Zero(1, 2)), InvalidArgument);
  Matrix bad = Matrix::Zero(1, 1);
  bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(t.add("b", bad), NonFinite);
}

TEST(NamedTensors, AssignKeepsShape) {
  NamedTensors t;
  t.add("a", Matrix::Zero(2, 2));
  EXPECT_THROW(t.assign("a", Matrix::Zero(2, 3)), ShapeMismatch);
  t.assign("a", Matrix::Ones(2, 2));
  EXPECT_EQ(t.at("a"), Matrix::Ones(2, 2));
  EXPECT_THROW(t.at("missing"), InvalidArgument);
}

TEST(NamedTensors, SubsetMergeLayout) {
  NamedTensors t;
  t.add("x.a", Matrix::Ones(1, 2));
  t.add("y.b", Matrix::Ones(3, 1));
  const NamedTensors x = t.subset("x.");
  EXPECT_EQ(x.size(), 1u);
  NamedTensors y = t.subset("y.");
  y.merge(x);
  EXPECT_TRUE(y.same_layout(t));
  EXPECT_TRUE(t.zeros_like().same_layout(t));
  EXPECT_EQ(y, t);
}

TEST(Serialize, RoundTripIsBitExact) {
  io::Writer w({"TESTMAGC", 8}, 3);
  Rng rng(1);
  const Matrix m = random_normal(3, 4, rng);
  w.u32(7);
  w.u64(1ULL << 40);
  w.i32(-5);
  w.f64(-0.0);
  w.str("hello");
  w.matrix(m);
  io::Reader r(w.finish(), {"TESTMAGC", 8}, 3, "test");
  EXPECT_EQ(r.u32(), 7u);
  EXPECT_EQ(r.u64(), 1ULL << 40);
  EXPECT_EQ(r.i32(), -5);
  EXPECT_TRUE(std::signbit(r.f64()));
  EXPECT_EQ(r.str(), "hello");
  EXPECT_EQ(r.matrix(), m);
  EXPECT_NO_THROW(r.expect_end());
}

TEST(Serialize, DetectsCorruptionTruncationAndVersion) {
  io::Writer w({"TESTMAGC", 8}, 3);
  w.str("payload");
  std::string bytes = w.finish();

  std::string flipped = bytes;
  flipped[14] ^= 0x01;
  EXPECT_THROW(io::Reader(flipped, {"TESTMAGC", 8}, 3, "test"), CorruptFile);
  EXPECT_THROW(io::Reader(bytes.substr(0, bytes.size() - 3), {"TESTMAGC", 8}, 3, "test"), CorruptFile);
  EXPECT_THROW(io::Reader(bytes, {"OTHERMAG", 8}, 3, "test"), CorruptFile);
  EXPECT_THROW(io::Reader(bytes, {"TESTMAGC", 8}, 4, "test"), VersionMismatch);
}

TEST(Serialize, ReadingPastEndIsCorrupt) {
  io::Writer w({"TESTMAGC", 8}, 1);
  w.u32(1);
  io::Reader r(w.finish(), {"TESTMAGC", 8}, 1, "test");
  r.u32();
  EXPECT_THROW(r.u64(), CorruptFile);
}

TEST(Serialize, MissingFileIsIoError) {
  EXPECT_THROW(io::Reader::open("/nonexistent/dir/file.bin", {"TESTMAGC", 8}, 1, "test"), IoError);
}

}  // namespace
}  // namespace prefixq
