#pragma once

// Feature tensors, label PNGs and run metadata on disk.
//
// DCFT v1 layout (little-endian):
//   bytes  0..3   "DCFT"
//   bytes  4..7   u32 version (1)
//   bytes  8..19  u32 height, u32 width, u32 dim
//   bytes 20..23  u32 dtype (0 = float32)
//   bytes 24..    height*width*dim payload values, row-major, channel-last

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "specseg/error.hpp"
#include "specseg/types.hpp"

namespace specseg {

inline constexpr std::array<char, 4> kDcftMagic{'D', 'C', 'F', 'T'};
inline constexpr std::uint32_t kDcftVersion = 1;
inline constexpr std::uint32_t kDcftFloat32 = 0;
inline constexpr std::size_t kDcftHeaderSize = 24;

namespace detail {

inline std::uint32_t read_u32_le(const unsigned char* p) noexcept {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void append_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoFailure, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(Errc::IoFailure, "read error on " + path.string());
  return bytes;
}

}  // namespace detail

/// Writes through a sibling temporary file and renames it into place, so a
/// reader never observes a partially written output.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::IoFailure, "cannot create " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(Errc::IoFailure, "write error on " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error(Errc::IoFailure, "cannot rename into " + path.string());
  }
}

// ---------------------------------------------------------------------------
// DCFT

inline std::string encode_features(const FeatureMap& fm) {
  std::string out;
  out.reserve(kDcftHeaderSize + fm.data().size() * 4);
  out.append(kDcftMagic.data(), kDcftMagic.size());
  detail::append_u32_le(out, kDcftVersion);
  detail::append_u32_le(out, static_cast<std::uint32_t>(fm.height()));
  detail::append_u32_le(out, static_cast<std::uint32_t>(fm.width()));
  detail::append_u32_le(out, static_cast<std::uint32_t>(fm.dim()));
  detail::append_u32_le(out, kDcftFloat32);
  for (std::size_t i = 0; i < fm.data().size(); ++i) {
    float v = fm.data()[i];
    if (!std::isfinite(v))
      throw Error(Errc::NonFiniteValue, "feature value at offset " + std::to_string(i) + " is not finite");
    detail::append_u32_le(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline FeatureMap decode_features(std::string_view bytes, const std::string& origin = "<memory>") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 4 || std::memcmp(p, kDcftMagic.data(), 4) != 0)
    throw Error(Errc::BadMagic, origin + " does not start with DCFT");
  if (bytes.size() < kDcftHeaderSize)
    throw Error(Errc::TruncatedPayload, origin + ": header is " + std::to_string(bytes.size()) + " bytes");
  const std::uint32_t version = detail::read_u32_le(p + 4);
  if (version != kDcftVersion)
    throw Error(Errc::UnsupportedVersion, origin + ": version " + std::to_string(version));
  const std::uint64_t h = detail::read_u32_le(p + 8);
  const std::uint64_t w = detail::read_u32_le(p + 12);
  const std::uint64_t d = detail::read_u32_le(p + 16);
  const std::uint32_t dtype = detail::read_u32_le(p + 20);
  if (dtype != kDcftFloat32) throw Error(Errc::UnsupportedDtype, origin + ": dtype code " + std::to_string(dtype));
  if (h == 0 || w == 0 || d == 0) throw Error(Errc::InvalidArgument, origin + ": zero dimension in header");

  const std::uint64_t count = h * w * d;
  const std::uint64_t payload = bytes.size() - kDcftHeaderSize;
  if (payload != count * 4)
    throw Error(Errc::TruncatedPayload, origin + ": payload is " + std::to_string(payload) + " bytes, header implies " +
                                            std::to_string(count * 4));

  std::vector<float> data(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    data[i] = std::bit_cast<float>(detail::read_u32_le(p + kDcftHeaderSize + 4 * i));
    if (!std::isfinite(data[i]))
      throw Error(Errc::NonFiniteValue, origin + ": value at offset " + std::to_string(i) + " is not finite");
  }
  return FeatureMap(h, w, d, std::move(data));
}

inline FeatureMap load_features(const std::filesystem::path& path) {
  return decode_features(detail::read_file(path), path.string());
}

inline void save_features(const FeatureMap& fm, const std::filesystem::path& path) {
  write_file_atomic(path, encode_features(fm));
}

// ---------------------------------------------------------------------------
// Metadata sidecar: `<features path>.json`

inline std::filesystem::path sidecar_path(const std::filesystem::path& features_path) {
  auto p = features_path;
  p += ".json";
  return p;
}

inline nlohmann::json to_json(const RunMetadata& m) {
  return {{"encoder_id", m.encoder_id},   {"timestep", m.timestep},         {"prompt", m.prompt},
          {"image_path", m.image_path}, {"image_height", m.image_height}, {"image_width", m.image_width}};
}

inline RunMetadata metadata_from_json(const nlohmann::json& j) {
  RunMetadata m;
  m.encoder_id = j.value("encoder_id", std::string{});
  m.timestep = j.value("timestep", 50);
  m.prompt = j.value("prompt", std::string{});
  m.image_path = j.value("image_path", std::string{});
  m.image_height = j.value("image_height", std::size_t{0});
  m.image_width = j.value("image_width", std::size_t{0});
  if (m.timestep < 0 || m.timestep > 1000)
    throw Error(Errc::InvalidArgument, "timestep " + std::to_string(m.timestep) + " outside [0, 1000]");
  return m;
}

/// Missing sidecar is not an error.
inline std::optional<RunMetadata> load_metadata(const std::filesystem::path& features_path) {
  const auto path = sidecar_path(features_path);
  if (!std::filesystem::exists(path)) return std::nullopt;
  try {
    return metadata_from_json(nlohmann::json::parse(detail::read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::IoFailure, path.string() + ": " + e.what());
  }
}

inline void save_metadata(const RunMetadata& m, const std::filesystem::path& features_path) {
  write_file_atomic(sidecar_path(features_path), to_json(m).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// PNG

namespace detail {

struct PngReadState {
  std::string_view bytes;
  std::size_t offset = 0;
};

inline void png_read_from_memory(png_structp png, png_bytep out, png_size_t length) {
  auto* state = static_cast<PngReadState*>(png_get_io_ptr(png));
  if (state->offset + length > state->bytes.size()) png_error(png, "unexpected end of PNG data");
  std::memcpy(out, state->bytes.data() + state->offset, length);
  state->offset += length;
}

inline void png_write_to_string(png_structp png, png_bytep data, png_size_t length) {
  static_cast<std::string*>(png_get_io_ptr(png))->append(reinterpret_cast<const char*>(data), length);
}

inline void png_flush_noop(png_structp) {}

enum class PngMode { Labels, Rgb };

struct DecodedPng {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  int channels = 0;
  int bit_depth = 0;
  std::vector<unsigned char> pixels;  // rows as stored (16-bit big-endian)
  bool unsupported = false;
  char error[256] = {};
};

// libpng reports failures with longjmp; keep this frame free of objects with
// non-trivial destructors between setjmp and the decode calls.
inline bool decode_png_raw(PngReadState* input, PngMode mode, DecodedPng* out) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    if (out->error[0] == '\0') std::snprintf(out->error, sizeof(out->error), "corrupt PNG stream");
    return false;
  }
  png_set_read_fn(png, input, png_read_from_memory);
  png_read_info(png, info);

  const int color_type = png_get_color_type(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  const bool has_trns = png_get_valid(png, info, PNG_INFO_tRNS) != 0;

  if (mode == PngMode::Labels) {
    const bool gray = color_type == PNG_COLOR_TYPE_GRAY && !has_trns;
    const bool plain_palette = color_type == PNG_COLOR_TYPE_PALETTE && !has_trns;
    if (!gray && !plain_palette) {
      out->unsupported = true;
      std::snprintf(out->error, sizeof(out->error), "label PNG must be single-channel (color type %d%s)", color_type,
                    has_trns ? ", with transparency" : "");
      png_destroy_read_struct(&png, &info, nullptr);
      return false;
    }
    if (bit_depth < 8) png_set_packing(png);
  } else {
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (bit_depth == 16) png_set_strip_16(png);
    if (has_trns) png_set_tRNS_to_alpha(png);
    if ((color_type & PNG_COLOR_MASK_ALPHA) || has_trns) png_set_strip_alpha(png);
  }
  png_read_update_info(png, info);

  out->width = png_get_image_width(png, info);
  out->height = png_get_image_height(png, info);
  out->channels = png_get_channels(png, info);
  out->bit_depth = png_get_bit_depth(png, info);
  const png_size_t rowbytes = png_get_rowbytes(png, info);
  out->pixels.resize(rowbytes * out->height);
  for (std::uint32_t y = 0; y < out->height; ++y) png_read_row(png, out->pixels.data() + y * rowbytes, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

inline DecodedPng decode_png(std::string_view bytes, PngMode mode, const std::string& origin) {
  PngReadState input{bytes, 0};
  DecodedPng out;
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0)
    throw Error(Errc::UnsupportedPng, origin + " is not a PNG file");
  if (!decode_png_raw(&input, mode, &out))
    throw Error(out.unsupported ? Errc::UnsupportedPng : Errc::IoFailure, origin + ": " + out.error);
  return out;
}

inline bool encode_png_raw(std::string* sink, std::uint32_t width, std::uint32_t height, int color_type,
                           int bit_depth, const unsigned char* rows, std::size_t rowbytes) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_set_write_fn(png, sink, png_write_to_string, png_flush_noop);
  png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::uint32_t y = 0; y < height; ++y) png_write_row(png, rows + y * rowbytes);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

inline std::string encode_png(std::uint32_t width, std::uint32_t height, int color_type, int bit_depth,
                              const std::vector<unsigned char>& rows) {
  if (width == 0 || height == 0) throw Error(Errc::InvalidArgument, "cannot encode an empty PNG");
  std::string out;
  const std::size_t rowbytes = rows.size() / height;
  if (!encode_png_raw(&out, width, height, color_type, bit_depth, rows.data(), rowbytes))
    throw Error(Errc::IoFailure, "PNG encoding failed");
  return out;
}

}  // namespace detail

inline LabelMap decode_labels(std::string_view bytes, std::uint16_t ignore_index = kDefaultIgnoreIndex,
                              const std::string& origin = "<memory>") {
  auto png = detail::decode_png(bytes, detail::PngMode::Labels, origin);
  LabelMap map;
  map.height = png.height;
  map.width = png.width;
  map.ignore_index = ignore_index;
  map.labels.resize(static_cast<std::size_t>(png.width) * png.height);
  if (png.bit_depth == 16) {
    for (std::size_t i = 0; i < map.labels.size(); ++i)
      map.labels[i] = static_cast<std::uint16_t>((png.pixels[2 * i] << 8) | png.pixels[2 * i + 1]);
  } else {
    for (std::size_t i = 0; i < map.labels.size(); ++i) map.labels[i] = png.pixels[i];
  }
  return map;
}

inline LabelMap load_labels(const std::filesystem::path& path, std::uint16_t ignore_index = kDefaultIgnoreIndex) {
  return decode_labels(detail::read_file(path), ignore_index, path.string());
}

/// 16-bit grayscale PNG bytes for a label grid.
template <typename Label>
std::string encode_label_png(std::size_t height, std::size_t width, const std::vector<Label>& labels) {
  if (labels.size() != height * width) throw Error(Errc::DimensionMismatch, "label count does not match dimensions");
  std::vector<unsigned char> rows(labels.size() * 2);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto v = static_cast<long long>(labels[i]);
    if (v < 0 || v > 65535) throw Error(Errc::InvalidArgument, "label " + std::to_string(v) + " outside [0, 65535]");
    rows[2 * i] = static_cast<unsigned char>(v >> 8);
    rows[2 * i + 1] = static_cast<unsigned char>(v & 0xff);
  }
  return detail::encode_png(static_cast<std::uint32_t>(width), static_cast<std::uint32_t>(height),
                            PNG_COLOR_TYPE_GRAY, 16, rows);
}

inline void save_segmentation(const LabelMap& map, const std::filesystem::path& path) {
  write_file_atomic(path, encode_label_png(map.height, map.width, map.labels));
}

inline void save_segmentation(const HiResSegmentation& seg, const std::filesystem::path& path) {
  write_file_atomic(path, encode_label_png(seg.height, seg.width, seg.labels));
}

inline RgbImage decode_rgb(std::string_view bytes, const std::string& origin = "<memory>") {
  auto png = detail::decode_png(bytes, detail::PngMode::Rgb, origin);
  RgbImage img;
  img.height = png.height;
  img.width = png.width;
  img.data.resize(png.pixels.size());
  for (std::size_t i = 0; i < png.pixels.size(); ++i) img.data[i] = static_cast<float>(png.pixels[i]) / 255.0f;
  return img;
}

inline RgbImage load_rgb(const std::filesystem::path& path) { return decode_rgb(detail::read_file(path), path.string()); }

/// 8-bit RGB PNG; values are rounded from [0, 1].
inline void save_rgb(const RgbImage& img, const std::filesystem::path& path) {
  std::vector<unsigned char> rows(img.data.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    rows[i] = static_cast<unsigned char>(std::lround(std::clamp(img.data[i], 0.0f, 1.0f) * 255.0f));
  write_file_atomic(path, detail::encode_png(static_cast<std::uint32_t>(img.width),
                                             static_cast<std::uint32_t>(img.height), PNG_COLOR_TYPE_RGB, 8, rows));
}

inline void save_rgb8(std::size_t height, std::size_t width, const std::vector<unsigned char>& rgb,
                      const std::filesystem::path& path) {
  write_file_atomic(path, detail::encode_png(static_cast<std::uint32_t>(width), static_cast<std::uint32_t>(height),
                                             PNG_COLOR_TYPE_RGB, 8, rgb));
}

}  // namespace specseg
