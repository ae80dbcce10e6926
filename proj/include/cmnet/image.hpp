#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cmnet/tensor.hpp"

namespace cmnet {

// Interleaved H x W x C pixel grid of floats.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t ch) {
    return pixels[(y * width + x) * channels + ch];
  }
  float at(std::size_t y, std::size_t x, std::size_t ch) const {
    return pixels[(y * width + x) * channels + ch];
  }
  bool operator==(const Image&) const = default;
};

// Stacks equally sized images into an N x C x H x W tensor.
template <typename T>
Tensor<T> images_to_tensor(std::span<const Image* const> images) {
  if (images.empty()) throw InputError("images_to_tensor: no images");
  const Image& first = *images.front();
  Tensor<T> out({images.size(), first.channels, first.height, first.width});
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Image& img = *images[n];
    if (img.height != first.height || img.width != first.width ||
        img.channels != first.channels) {
      throw InputError("images_to_tensor: images differ in size");
    }
    for (std::size_t y = 0; y < img.height; ++y) {
      for (std::size_t x = 0; x < img.width; ++x) {
        for (std::size_t c = 0; c < img.channels; ++c) {
          out.at(n, c, y, x) = static_cast<T>(img.at(y, x, c));
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> image_to_tensor(const Image& image) {
  const Image* ptr = &image;
  return images_to_tensor<T>(std::span<const Image* const>(&ptr, 1));
}

}  // namespace cmnet
