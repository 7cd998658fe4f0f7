#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "specseg/error.hpp"

namespace specseg {

/// Grid of patch embeddings, row-major and channel-last: value (h, w, c)
/// lives at `(h * width + w) * dim + c`. Always finite.
class FeatureMap {
 public:
  FeatureMap() = default;

  FeatureMap(std::size_t height, std::size_t width, std::size_t dim, std::vector<float> data)
      : height_(height), width_(width), dim_(dim), data_(std::move(data)) {
    if (height_ == 0 || width_ == 0 || dim_ == 0)
      throw Error(Errc::InvalidArgument, "feature map dimensions must be positive");
    if (data_.size() != height_ * width_ * dim_)
      throw Error(Errc::InvalidArgument, "feature payload length " + std::to_string(data_.size()) +
                                             " != " + std::to_string(height_ * width_ * dim_));
    for (std::size_t i = 0; i < data_.size(); ++i)
      if (!std::isfinite(data_[i]))
        throw Error(Errc::NonFiniteValue, "feature value at offset " + std::to_string(i) + " is not finite");
  }

  /// Zero-filled map of the given shape.
  static FeatureMap zeros(std::size_t height, std::size_t width, std::size_t dim) {
    return FeatureMap(height, width, dim, std::vector<float>(height * width * dim, 0.0f));
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t num_patches() const noexcept { return height_ * width_; }

  std::span<const float> data() const noexcept { return data_; }
  std::span<const float> patch(std::size_t index) const noexcept {
    return std::span<const float>(data_).subspan(index * dim_, dim_);
  }
  std::span<float> patch(std::size_t index) noexcept {
    return std::span<float>(data_).subspan(index * dim_, dim_);
  }
  float at(std::size_t h, std::size_t w, std::size_t c) const noexcept {
    return data_[(h * width_ + w) * dim_ + c];
  }

  bool operator==(const FeatureMap&) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t dim_ = 0;
  std::vector<float> data_;
};

inline constexpr std::uint16_t kDefaultIgnoreIndex = 255;

/// Per-pixel ground-truth (or raw prediction) labels.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint16_t> labels;
  std::uint16_t ignore_index = kDefaultIgnoreIndex;

  std::uint16_t at(std::size_t y, std::size_t x) const noexcept { return labels[y * width + x]; }
  bool operator==(const LabelMap&) const = default;
};

/// Provenance of a feature file; stored in an optional JSON sidecar.
struct RunMetadata {
  std::string encoder_id;
  int timestep = 50;
  std::string prompt;
  std::string image_path;
  std::size_t image_height = 0;
  std::size_t image_width = 0;

  bool operator==(const RunMetadata&) const = default;
};

/// Flat labels on the patch grid. Labels are dense in [0, num_segments) and
/// numbered in order of first occurrence.
struct SegmentationMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> labels;
  int num_segments = 0;

  bool operator==(const SegmentationMap&) const = default;
};

/// Pixel-resolution labels in [0, num_segments).
struct HiResSegmentation {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> labels;
  int num_segments = 0;

  int at(std::size_t y, std::size_t x) const noexcept { return labels[y * width + x]; }
  bool operator==(const HiResSegmentation&) const = default;
};

/// Interleaved RGB, values in [0, 1].
struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;

  float at(std::size_t y, std::size_t x, std::size_t c) const noexcept { return data[(y * width + x) * 3 + c]; }
};

/// Renumbers arbitrary integer labels so that they appear as 0, 1, 2, ... in
/// scan order. Returns the number of distinct labels.
template <typename Label>
int renumber_by_first_occurrence(std::vector<Label>& labels) {
  std::unordered_map<Label, Label> remap;
  for (auto& l : labels) {
    auto [it, inserted] = remap.try_emplace(l, static_cast<Label>(remap.size()));
    l = it->second;
  }
  return static_cast<int>(remap.size());
}

}  // namespace specseg
