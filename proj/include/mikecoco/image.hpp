#pragma once

#include <filesystem>
#include <vector>

namespace mikecoco {

// Planar (channel-major) image with pixel values nominally in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  double& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  bool same_shape(const Image& o) const { return height == o.height && width == o.width && channels == o.channels; }
  bool empty() const { return data.empty(); }
};

// PNG (8-bit gray/RGB/RGBA; alpha dropped) and binary PPM/PGM are understood.
Image read_image(const std::filesystem::path& path);
// Writes 8-bit PNG; values are clamped to [0, 1] and rounded.
void write_png(const std::filesystem::path& path, const Image& image);

Image resize_bilinear(const Image& src, int height, int width);
Image hflip(const Image& src);
// Rotates about the image centre by `degrees` (counter-clockwise); uncovered pixels are 0.
Image rotate(const Image& src, double degrees);
// Zero-pads by `pad` on every side, then crops the original size at offset (top, left) of the padded image.
Image pad_crop(const Image& src, int pad, int top, int left);
void clamp01(Image& image);

}  // namespace mikecoco
