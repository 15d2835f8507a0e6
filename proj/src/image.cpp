#include "mikecoco/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numbers>
#include <string>

#include "mikecoco/error.hpp"

namespace mikecoco {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

Image read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw RuntimeFailure("cannot open image " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8)) {
    throw RuntimeFailure("not a PNG file: " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw RuntimeFailure("libpng initialisation failed");
  }
  Image out;
  std::vector<png_bytep> rows;
  std::vector<unsigned char> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw RuntimeFailure("corrupt PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int c = png_get_channels(png, info);
  buffer.resize(static_cast<std::size_t>(w) * h * c);
  rows.resize(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) rows[y] = buffer.data() + static_cast<std::size_t>(y) * w * c;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  out = Image(h, w, c);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        out.at(ch, y, x) = buffer[(static_cast<std::size_t>(y) * w + x) * c + ch] / 255.0;
  return out;
}

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeFailure("cannot open image " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6" && magic != "P5") throw RuntimeFailure("unsupported PNM variant in " + path.string());
  auto next_int = [&]() {
    int v = 0;
    while (in >> std::ws && in.peek() == '#') {
      std::string skip;
      std::getline(in, skip);
    }
    in >> v;
    return v;
  };
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  in.get();
  if (!in || w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw RuntimeFailure("bad PNM header in " + path.string());
  const int c = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * c);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw RuntimeFailure("truncated PNM data in " + path.string());
  Image out(h, w, c);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        out.at(ch, y, x) = buf[(static_cast<std::size_t>(y) * w + x) * c + ch] / static_cast<double>(maxval);
  return out;
}

double sample_bilinear(const Image& src, int c, double y, double x) {
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const double fy = y - y0;
  const double fx = x - x0;
  auto px = [&](int yy, int xx) {
    if (yy < 0 || yy >= src.height || xx < 0 || xx >= src.width) return 0.0;
    return src.at(c, yy, xx);
  };
  return (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
         fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  if (ext == ".png") return read_png(path);
  if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") return read_pnm(path);
  throw RuntimeFailure("unsupported image format: " + path.string());
}

void write_png(const std::filesystem::path& path, const Image& image) {
  require(!image.empty() && (image.channels == 1 || image.channels == 3), "write_png: need a 1- or 3-channel image");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw RuntimeFailure("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw RuntimeFailure("libpng initialisation failed");
  }
  const int w = image.width;
  const int h = image.height;
  const int c = image.channels;
  std::vector<unsigned char> buffer(static_cast<std::size_t>(w) * h * c);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        const double v = std::clamp(image.at(ch, y, x), 0.0, 1.0);
        buffer[(static_cast<std::size_t>(y) * w + x) * c + ch] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) rows[y] = buffer.data() + static_cast<std::size_t>(y) * w * c;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw RuntimeFailure("PNG encoding failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, w, h, 8, c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image resize_bilinear(const Image& src, int height, int width) {
  require(height > 0 && width > 0, "resize: target size must be positive");
  if (src.height == height && src.width == width) return src;
  Image out(height, width, src.channels);
  const double sy = static_cast<double>(src.height) / height;
  const double sx = static_cast<double>(src.width) / width;
  for (int c = 0; c < src.channels; ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        // Half-pixel centres, edge-clamped.
        const double yy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
        const double xx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
        out.at(c, y, x) = sample_bilinear(src, c, yy, xx);
      }
  return out;
}

Image hflip(const Image& src) {
  Image out(src.height, src.width, src.channels);
  for (int c = 0; c < src.channels; ++c)
    for (int y = 0; y < src.height; ++y)
      for (int x = 0; x < src.width; ++x) out.at(c, y, x) = src.at(c, y, src.width - 1 - x);
  return out;
}

Image rotate(const Image& src, double degrees) {
  if (degrees == 0.0) return src;
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad);
  const double sn = std::sin(rad);
  const double cy = (src.height - 1) / 2.0;
  const double cx = (src.width - 1) / 2.0;
  Image out(src.height, src.width, src.channels);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x) {
      // Inverse map output pixel back into the source.
      const double dy = y - cy;
      const double dx = x - cx;
      const double sx = cs * dx - sn * dy + cx;
      const double sy = sn * dx + cs * dy + cy;
      for (int c = 0; c < src.channels; ++c) out.at(c, y, x) = sample_bilinear(src, c, sy, sx);
    }
  return out;
}

Image pad_crop(const Image& src, int pad, int top, int left) {
  require(pad >= 0 && top >= 0 && left >= 0 && top <= 2 * pad && left <= 2 * pad, "pad_crop: offset outside padding");
  Image out(src.height, src.width, src.channels);
  for (int c = 0; c < src.channels; ++c)
    for (int y = 0; y < src.height; ++y)
      for (int x = 0; x < src.width; ++x) {
        const int sy = y + top - pad;
        const int sx = x + left - pad;
        if (sy >= 0 && sy < src.height && sx >= 0 && sx < src.width) out.at(c, y, x) = src.at(c, sy, sx);
      }
  return out;
}

void clamp01(Image& image) {
  for (auto& v : image.data) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace mikecoco
