#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "triplex/tensor.hpp"

namespace triplex {

// 8-bit interleaved RGB image, rows top to bottom.
struct ImageU8 {
  int64_t h = 0, w = 0;
  std::vector<uint8_t> data;  // h * w * 3

  ImageU8() = default;
  ImageU8(int64_t h_, int64_t w_) : h(h_), w(w_), data(static_cast<size_t>(h_ * w_ * 3), 0) {}

  uint8_t at(int64_t y, int64_t x, int c) const {
    return data[static_cast<size_t>((y * w + x) * 3 + c)];
  }
  uint8_t& at(int64_t y, int64_t x, int c) {
    return data[static_cast<size_t>((y * w + x) * 3 + c)];
  }
};

// Binary portable pixmap (P6, maxval 255).
ImageU8 read_ppm(const std::string& path);
void write_ppm(const std::string& path, const ImageU8& img);

// Raw planar RGB: three h*w planes back to back, dimensions from the caller.
ImageU8 read_raw_planar(const std::string& path, int64_t h, int64_t w);

// (3, h, w) float tensor scaled to [0, 1].
Tensor<float> image_to_chw(const ImageU8& img);

}  // namespace triplex
