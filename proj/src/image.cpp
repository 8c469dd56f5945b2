#include "triplex/image.hpp"

#include <fstream>

#include "triplex/common.hpp"

namespace triplex {

ImageU8 read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("ppm: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw IoError("ppm: " + path + " is not a binary P6 pixmap");
  auto next_int = [&]() {
    // skip whitespace and '#' comments
    int c = in.get();
    while (c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '#') {
      if (c == '#')
        while (c != '\n' && c != EOF) c = in.get();
      c = in.get();
    }
    int64_t v = 0;
    bool any = false;
    while (c >= '0' && c <= '9') {
      v = v * 10 + (c - '0');
      any = true;
      c = in.get();
    }
    if (!any) throw IoError("ppm: malformed header in " + path);
    return v;
  };
  const int64_t w = next_int();
  const int64_t h = next_int();
  const int64_t maxval = next_int();
  if (maxval != 255) throw IoError("ppm: " + path + " must have maxval 255");
  ImageU8 img(h, w);
  in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.data.size()))
    throw IoError("ppm: truncated pixel data in " + path);
  return img;
}

void write_ppm(const std::string& path, const ImageU8& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("ppm: cannot write " + path);
  out << "P6\n" << img.w << " " << img.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size()));
  if (!out) throw IoError("ppm: write failed for " + path);
}

ImageU8 read_raw_planar(const std::string& path, int64_t h, int64_t w) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("raw: cannot open " + path);
  std::vector<uint8_t> planes(static_cast<size_t>(h * w * 3));
  in.read(reinterpret_cast<char*>(planes.data()), static_cast<std::streamsize>(planes.size()));
  if (in.gcount() != static_cast<std::streamsize>(planes.size()))
    throw IoError("raw: expected " + std::to_string(h * w * 3) + " bytes in " + path);
  ImageU8 img(h, w);
  const int64_t plane = h * w;
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = planes[static_cast<size_t>(c * plane + y * w + x)];
  return img;
}

Tensor<float> image_to_chw(const ImageU8& img) {
  Tensor<float> out({3, img.h, img.w});
  float* p = out.data();
  const int64_t plane = img.h * img.w;
  for (int64_t y = 0; y < img.h; ++y)
    for (int64_t x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c)
        p[c * plane + y * img.w + x] = static_cast<float>(img.at(y, x, c)) / 255.0f;
  return out;
}

}  // namespace triplex
