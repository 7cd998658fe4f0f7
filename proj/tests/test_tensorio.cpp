#include <gtest/gtest.h>

#include <bit>
#include <cstring>
#include <limits>

#include "expect_error.hpp"
#include "support.hpp"

using namespace specseg;
using testsupport::TempDir;

namespace {

std::string file_bytes(const std::filesystem::path& p) { return detail::read_file(p); }

}  // namespace

TEST(Dcft, SmallMapRoundTrip) {
  TempDir dir;
  FeatureMap fm(2, 2, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  save_features(fm, dir / "a.dcft");
  EXPECT_EQ(load_features(dir / "a.dcft"), fm);
}

TEST(Dcft, SingleValueLayout) {
  FeatureMap fm(1, 1, 1, {0.5f});
  const std::string bytes = encode_features(fm);
  ASSERT_EQ(bytes.size(), 28u);  // 24-byte header + one float
  EXPECT_EQ(bytes.substr(0, 4), "DCFT");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  EXPECT_EQ(detail::read_u32_le(p + 4), 1u);
  EXPECT_EQ(detail::read_u32_le(p + 8), 1u);
  EXPECT_EQ(detail::read_u32_le(p + 12), 1u);
  EXPECT_EQ(detail::read_u32_le(p + 16), 1u);
  EXPECT_EQ(detail::read_u32_le(p + 20), 0u);
  // 0.5f = 0x3F000000, little-endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[24]), 0x00);
  EXPECT_EQ(static_cast<unsigned char>(bytes[27]), 0x3F);
}

TEST(Dcft, RejectsBadMagic) {
  std::string bytes = encode_features(FeatureMap(1, 1, 1, {1.0f}));
  bytes.replace(0, 4, "XXXX");
  expect_code(Errc::BadMagic, [&] { decode_features(bytes); });
}

TEST(Dcft, RejectsVersionAndDtype) {
  const std::string good = encode_features(FeatureMap(1, 1, 2, {1.0f, 2.0f}));
  std::string v = good;
  v[4] = 2;
  expect_code(Errc::UnsupportedVersion, [&] { decode_features(v); });
  std::string t = good;
  t[20] = 1;
  expect_code(Errc::UnsupportedDtype, [&] { decode_features(t); });
}

TEST(Dcft, RejectsLengthDisagreement) {
  const std::string good = encode_features(FeatureMap(2, 1, 2, {1, 2, 3, 4}));
  expect_code(Errc::TruncatedPayload, [&] { decode_features(good.substr(0, good.size() - 1)); });
  expect_code(Errc::TruncatedPayload, [&] { decode_features(good + "x"); });
  expect_code(Errc::TruncatedPayload, [&] { decode_features(good.substr(0, 10)); });
}

TEST(Dcft, RejectsNonFinite) {
  std::string bytes = encode_features(FeatureMap(1, 1, 2, {1.0f, 2.0f}));
  const auto nan_bits = std::bit_cast<std::uint32_t>(std::numeric_limits<float>::quiet_NaN());
  for (int i = 0; i < 4; ++i) bytes[28 + i] = static_cast<char>((nan_bits >> (8 * i)) & 0xff);
  expect_code(Errc::NonFiniteValue, [&] { decode_features(bytes); });
  expect_code(Errc::NonFiniteValue,
              [] { FeatureMap(1, 1, 1, {std::numeric_limits<float>::infinity()}); });
}

TEST(Dcft, ByteIdenticalResave) {
  TempDir dir;
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> dim(1, 9);
  for (int t = 0; t < 100; ++t) {
    const auto fm = testsupport::random_features(rng, dim(rng), dim(rng), dim(rng));
    save_features(fm, dir / "a.dcft");
    save_features(load_features(dir / "a.dcft"), dir / "b.dcft");
    ASSERT_EQ(file_bytes(dir / "a.dcft"), file_bytes(dir / "b.dcft"));
  }
}

TEST(Dcft, FullSizeMapBitExact) {
  TempDir dir;
  std::mt19937_64 rng(11);
  const auto fm = testsupport::random_features(rng, 32, 32, 1280);
  save_features(fm, dir / "big.dcft");
  const auto back = load_features(dir / "big.dcft");
  ASSERT_EQ(back.data().size(), fm.data().size());
  EXPECT_EQ(std::memcmp(back.data().data(), fm.data().data(), fm.data().size() * sizeof(float)), 0);
}

TEST(Dcft, PreservesNegativeZeroAndSubnormals) {
  const float sub = std::numeric_limits<float>::denorm_min();
  FeatureMap fm(1, 1, 3, {-0.0f, sub, -sub});
  const auto back = decode_features(encode_features(fm));
  for (std::size_t i = 0; i < 3; ++i)
    EXPECT_EQ(std::bit_cast<std::uint32_t>(back.data()[i]), std::bit_cast<std::uint32_t>(fm.data()[i]));
}

TEST(Dcft, MissingFileIsIoFailure) {
  expect_code(Errc::IoFailure, [] { load_features("/nonexistent/specseg/x.dcft"); });
}

TEST(Sidecar, AbsentIsFine) {
  TempDir dir;
  EXPECT_FALSE(load_metadata(dir / "a.dcft").has_value());
}

TEST(Sidecar, RoundTrip) {
  TempDir dir;
  RunMetadata m{"ssd-1b", 50, "", "img/0001.png", 480, 640};
  save_metadata(m, dir / "a.dcft");
  EXPECT_TRUE(std::filesystem::exists(dir / "a.dcft.json"));
  EXPECT_EQ(load_metadata(dir / "a.dcft"), m);
}

TEST(Sidecar, RejectsTimestepOutOfRange) {
  expect_code(Errc::InvalidArgument, [] { metadata_from_json({{"timestep", 1001}}); });
  expect_code(Errc::InvalidArgument, [] { metadata_from_json({{"timestep", -1}}); });
}

TEST(LabelPng, EightBitValuesPreserved) {
  // 8-bit gray 3x1 image with values 0, 1, 255.
  const std::vector<unsigned char> rows{0, 1, 255};
  const auto bytes = detail::encode_png(3, 1, PNG_COLOR_TYPE_GRAY, 8, rows);
  const auto map = decode_labels(bytes);
  EXPECT_EQ(map.labels, (std::vector<std::uint16_t>{0, 1, 255}));
  EXPECT_EQ(map.ignore_index, 255);
}

TEST(LabelPng, PaletteIndicesPreserved) {
  png_color palette[4] = {{0, 0, 0}, {128, 0, 0}, {0, 128, 0}, {128, 128, 0}};
  std::string out;
  // Write a palette PNG by hand; indices must come back unchanged.
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  png_set_write_fn(png, &out, detail::png_write_to_string, detail::png_flush_noop);
  png_set_IHDR(png, info, 4, 1, 8, PNG_COLOR_TYPE_PALETTE, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_set_PLTE(png, info, palette, 4);
  png_write_info(png, info);
  unsigned char row[4] = {3, 2, 1, 0};
  png_write_row(png, row);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  EXPECT_EQ(decode_labels(out).labels, (std::vector<std::uint16_t>{3, 2, 1, 0}));
}

TEST(LabelPng, RgbRejected) {
  const std::vector<unsigned char> rows(2 * 3, 7);
  const auto bytes = detail::encode_png(2, 1, PNG_COLOR_TYPE_RGB, 8, rows);
  expect_code(Errc::UnsupportedPng, [&] { decode_labels(bytes); });
}

TEST(LabelPng, NotAPng) { expect_code(Errc::UnsupportedPng, [] { decode_labels("definitely not png"); }); }

TEST(LabelPng, SixteenBitRoundTrip) {
  TempDir dir;
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> v(0, 65535);
  LabelMap map{17, 23, std::vector<std::uint16_t>(17 * 23), 255};
  for (auto& l : map.labels) l = static_cast<std::uint16_t>(v(rng));
  map.labels[0] = 0;
  map.labels[1] = 65535;
  save_segmentation(map, dir / "m.png");
  EXPECT_EQ(load_labels(dir / "m.png"), map);
}

TEST(LabelPng, RangeChecked) {
  expect_code(Errc::InvalidArgument, [] { encode_label_png(1, 1, std::vector<int>{70000}); });
  expect_code(Errc::InvalidArgument, [] { encode_label_png(1, 1, std::vector<int>{-1}); });
}

TEST(RgbPng, RoundTripEightBit) {
  TempDir dir;
  RgbImage img{2, 2, {0, 0.5f, 1, 1, 0, 0, 0.2f, 0.4f, 0.6f, 1, 1, 1}};
  save_rgb(img, dir / "i.png");
  const auto back = load_rgb(dir / "i.png");
  ASSERT_EQ(back.data.size(), img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(back.data[i], img.data[i], 0.5 / 255.0 + 1e-7);
}

TEST(AtomicWrite, LeavesNoTemporary) {
  TempDir dir;
  write_file_atomic(dir / "x.txt", "hello");
  EXPECT_EQ(file_bytes(dir / "x.txt"), "hello");
  EXPECT_FALSE(std::filesystem::exists(dir / "x.txt.tmp"));
}
