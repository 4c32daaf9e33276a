#pragma once

#include "reusegate/tensor.hpp"

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace reusegate {

/// Interleaved 8-bit RGB, row-major.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  RgbImage() = default;
  RgbImage(int w, int h) : width(w), height(h), rgb(std::size_t(w) * h * 3, 0) {}
  std::uint8_t* pixel(int x, int y) { return &rgb[(std::size_t(y) * width + x) * 3]; }
  const std::uint8_t* pixel(int x, int y) const { return &rgb[(std::size_t(y) * width + x) * 3]; }
  bool operator==(const RgbImage&) const = default;
};

/// (1, 3, H, W) tensor with values v / 255 - 0.5.
template <typename S>
Tensor<S> image_to_tensor(const RgbImage& img) {
  if (img.rgb.size() != std::size_t(img.width) * img.height * 3) {
    throw std::invalid_argument("image buffer does not match its dimensions");
  }
  Tensor<S> t({1, 3, img.height, img.width});
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const std::uint8_t* p = img.pixel(x, y);
      for (int c = 0; c < 3; ++c) t.at(0, c, y, x) = S(p[c]) / S(255) - S(0.5);
    }
  }
  return t;
}

}  // namespace reusegate
