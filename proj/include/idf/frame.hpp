#pragma once

#include <vector>

#include "idf/geometry.hpp"

namespace idf {

// Interleaved H x W x C image of floats.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, int c, float fill = 0.f)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  float& at(int row, int col, int ch = 0) {
    return data[(static_cast<std::size_t>(row) * width + col) * channels + ch];
  }
  float at(int row, int col, int ch = 0) const {
    return data[(static_cast<std::size_t>(row) * width + col) * channels + ch];
  }
  bool empty() const { return data.empty(); }
};

// One RGB-D observation. rgb in [0,1], depth in meters along the optical axis
// (0 = invalid).
struct Frame {
  Image rgb;    // 3 channels
  Image depth;  // 1 channel
  Intrinsics intrinsics;
  double timestamp = 0;

  int width() const { return intrinsics.width; }
  int height() const { return intrinsics.height; }

  void validate() const {
    intrinsics.validate();
    require(rgb.width == intrinsics.width && rgb.height == intrinsics.height && rgb.channels == 3,
            "frame: rgb dimensions do not match intrinsics");
    require(depth.width == intrinsics.width && depth.height == intrinsics.height &&
                depth.channels == 1,
            "frame: depth dimensions do not match intrinsics");
  }

  bool has_valid_depth() const {
    for (float d : depth.data)
      if (d > 0) return true;
    return false;
  }
};

}  // namespace idf
