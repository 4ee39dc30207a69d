#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "fedprior/errors.hpp"
#include "fedprior/numerics/rng.hpp"
#include "fedprior/persistence.hpp"

namespace fedprior::persist {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "fedprior_persist_test";
  fs::create_directories(dir);
  return dir / name;
}

Tensor random_tensor(Shape dims, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(dims));
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

// Fixture with reference checksums computed by a separate implementation.
ParamSet reference_set() {
  ParamSet p;
  p.add("a", Tensor({2, 2}, {1.0, 2.0, 3.0, 4.0}));
  Tensor c({1, 2}, {0.5, -1.25});
  c.set_complex(true);
  p.add("b/c", c);
  return p;
}

TEST(Fvt, RoundTripRandomTensorIsBitEqual) {
  const Tensor t = random_tensor({3, 4}, 1);
  save_tensor(t, scratch("r.fvt"));
  EXPECT_TRUE(bit_equal(load_tensor(scratch("r.fvt")), t));
}

TEST(Fvt, SpecialValuesSurvive) {
  Tensor t({5}, {-0.0, std::numeric_limits<double>::infinity(), std::numeric_limits<double>::quiet_NaN(),
                 std::numeric_limits<double>::denorm_min(), -1e308});
  EXPECT_TRUE(bit_equal(decode_tensor(encode_tensor(t)), t));
}

TEST(Fvt, ComplexFlagRoundTrips) {
  Tensor t = random_tensor({4, 3, 2}, 2);
  t.set_complex(true);
  const Bytes b = encode_tensor(t);
  EXPECT_EQ(b[5], kDtypeComplex);
  EXPECT_EQ(b[6], 2);
  const Tensor back = decode_tensor(b);
  EXPECT_TRUE(back.is_complex());
  EXPECT_TRUE(bit_equal(back, t));
}

TEST(Fvt, HeaderLayoutOfSmallRealTensor) {
  const Bytes b = encode_tensor(Tensor({2, 2}));
  const Bytes expect = {'F', 'V', 'T', '1', 1, 1, 2, 0, 2, 0, 0, 0, 2, 0, 0, 0};
  ASSERT_EQ(b.size(), 16u + 32u);
  EXPECT_TRUE(std::equal(expect.begin(), expect.end(), b.begin()));
}

TEST(Fvt, WrongMagicIsFormatError) {
  Bytes b = encode_tensor(Tensor({2}));
  b[0] = 'X';
  try {
    decode_tensor(b);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(Fvt, TruncationReportsOffset) {
  const Bytes full = encode_tensor(Tensor({3}));
  for (std::size_t cut : {0u, 3u, 7u, 13u, 20u, 35u}) {
    Bytes b(full.begin(), full.begin() + static_cast<long>(cut));
    EXPECT_THROW(decode_tensor(b), FormatError) << cut;
  }
  Bytes extra = full;
  extra.push_back(0);
  EXPECT_THROW(decode_tensor(extra), FormatError);
}

TEST(Fvt, BadVersionDtypeReservedRejected) {
  for (std::size_t pos : {4u, 5u, 7u}) {
    Bytes b = encode_tensor(Tensor({1}));
    b[pos] = 9;
    try {
      decode_tensor(b);
      FAIL();
    } catch (const FormatError& e) {
      EXPECT_EQ(e.offset(), pos);
    }
  }
}

TEST(Fvt, MissingFileIsIoError) { EXPECT_THROW(load_tensor(scratch("does_not_exist.fvt")), IoError); }

TEST(Container, EmptySetIsFourBytes) {
  const Bytes b = encode_paramset(ParamSet{});
  EXPECT_EQ(b, Bytes({0, 0, 0, 0}));
  EXPECT_TRUE(decode_paramset(b).empty());
  EXPECT_EQ(fnv1a64(b), 0x4d25767f9dce13f5ULL);
}

TEST(Container, RoundTripIsBitEqualAndByteStable) {
  ParamSet p;
  p.add("enc/w", random_tensor({9, 4}, 3));
  p.add("enc/b", random_tensor({4}, 4));
  p.add("z", random_tensor({1}, 5));
  save_paramset(p, scratch("p.bin"));
  const ParamSet back = load_paramset(scratch("p.bin"));
  EXPECT_TRUE(bit_equal(back, p));
  save_paramset(back, scratch("p2.bin"));
  EXPECT_EQ(read_file(scratch("p.bin")), read_file(scratch("p2.bin")));
}

TEST(Container, DuplicateAndUnorderedPathsRejected) {
  ParamSet one;
  one.add("w", Tensor({1}));
  Bytes one_bytes = encode_paramset(one);
  Bytes dup = {2, 0, 0, 0};
  dup.insert(dup.end(), one_bytes.begin() + 4, one_bytes.end());
  dup.insert(dup.end(), one_bytes.begin() + 4, one_bytes.end());
  EXPECT_THROW(decode_paramset(dup), FormatError);

  ParamSet two;
  two.add("b", Tensor({1}));
  Bytes b2 = encode_paramset(two);
  Bytes unordered = {2, 0, 0, 0};
  unordered.insert(unordered.end(), one_bytes.begin() + 4, one_bytes.end());
  unordered.insert(unordered.end(), b2.begin() + 4, b2.end());
  EXPECT_THROW(decode_paramset(unordered), FormatError);
}

TEST(Checksum, FnvKnownVectors) {
  EXPECT_EQ(fnv1a64({}), 0xcbf29ce484222325ULL);
  const std::uint8_t a[] = {'a'};
  EXPECT_EQ(fnv1a64(a), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(hex64(0xaf63dc4c8601ec8cULL), "af63dc4c8601ec8c");
}

TEST(Checksum, FixedVectorMatchesReference) {
  const Bytes b = encode_paramset(reference_set());
  EXPECT_EQ(b.size(), 88u);
  EXPECT_EQ(fnv1a64(b), 0x543014ce8678a82cULL);
  const Tensor t({3}, {0.1, -0.0, 1e300});
  EXPECT_EQ(fnv1a64(encode_tensor(t)), 0x83ab764042dc3b51ULL);
}

TEST(Checksum, SimulatedBigEndianHostProducesSameBytes) {
  const Tensor t({3}, {0.1, -0.0, 1e300});
  const Bytes big = detail::encode_tensor_as(t, detail::HostOrder::big);
  EXPECT_EQ(big, detail::encode_tensor_as(t, detail::HostOrder::little));
  EXPECT_EQ(fnv1a64(big), 0x83ab764042dc3b51ULL);
}

TEST(Csv, QuotesOnlyWhenNeeded) {
  EXPECT_EQ(csv_field("abc"), "abc");
  EXPECT_EQ(csv_field("a,b"), "\"a,b\"");
  EXPECT_EQ(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
  EXPECT_EQ(csv_row({"x", "1"}), "x,1\r\n");
}

TEST(Csv, FormatDoubleRoundTrips) {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 12345.678}) EXPECT_EQ(std::stod(format_double(v)), v);
}

}  // namespace
}  // namespace fedprior::persist
