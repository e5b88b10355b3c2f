#include "endodepth/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace endodepth {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void fail(const std::string& what, const std::string& path) {
  throw std::runtime_error(what + ": " + path);
}

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReader() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
  }
};

struct PngWriter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriter() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
  }
};

}  // namespace

Image read_png_rgb8(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) fail("cannot open image", path);
  PngReader r;
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  r.info = png_create_info_struct(r.png);
  if (!r.png || !r.info || setjmp(png_jmpbuf(r.png))) fail("png read error", path);
  png_init_io(r.png, fp.get());
  png_read_info(r.png, r.info);

  png_set_expand(r.png);
  png_set_strip_16(r.png);
  png_set_strip_alpha(r.png);
  png_set_gray_to_rgb(r.png);
  png_read_update_info(r.png, r.info);

  const std::size_t w = png_get_image_width(r.png, r.info);
  const std::size_t h = png_get_image_height(r.png, r.info);
  if (png_get_channels(r.png, r.info) != 3) fail("expected RGB image", path);

  std::vector<std::uint8_t> rowbuf(w * 3);
  Image out(3, h, w);
  for (std::size_t y = 0; y < h; ++y) {
    png_read_row(r.png, rowbuf.data(), nullptr);
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        out.at(c, y, x) = rowbuf[x * 3 + c] / 255.0;
  }
  png_read_end(r.png, nullptr);
  return out;
}

void write_png_rgb8(const std::string& path, const Image& image) {
  if (image.channels != 3) throw std::invalid_argument("write_png_rgb8: needs 3 channels");
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) fail("cannot open image for writing", path);
  PngWriter w;
  w.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  w.info = png_create_info_struct(w.png);
  if (!w.png || !w.info || setjmp(png_jmpbuf(w.png))) fail("png write error", path);
  png_init_io(w.png, fp.get());
  png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(image.width),
               static_cast<png_uint_32>(image.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(w.png, w.info);
  std::vector<std::uint8_t> rowbuf(image.width * 3);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(image.at(c, y, x), 0.0, 1.0);
        rowbuf[x * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    png_write_row(w.png, rowbuf.data());
  }
  png_write_end(w.png, nullptr);
}

void read_png_gray16(const std::string& path, std::vector<std::uint16_t>& raw,
                     std::size_t& height, std::size_t& width) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) fail("cannot open depth image", path);
  PngReader r;
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  r.info = png_create_info_struct(r.png);
  if (!r.png || !r.info || setjmp(png_jmpbuf(r.png))) fail("png read error", path);
  png_init_io(r.png, fp.get());
  png_read_info(r.png, r.info);
  if (png_get_color_type(r.png, r.info) != PNG_COLOR_TYPE_GRAY ||
      png_get_bit_depth(r.png, r.info) != 16)
    fail("expected 16-bit grayscale depth image", path);
  png_read_update_info(r.png, r.info);

  width = png_get_image_width(r.png, r.info);
  height = png_get_image_height(r.png, r.info);
  raw.assign(width * height, 0);
  std::vector<std::uint8_t> rowbuf(width * 2);
  for (std::size_t y = 0; y < height; ++y) {
    png_read_row(r.png, rowbuf.data(), nullptr);
    for (std::size_t x = 0; x < width; ++x) {
      // PNG stores 16-bit samples big-endian
      raw[y * width + x] =
          static_cast<std::uint16_t>((rowbuf[x * 2] << 8) | rowbuf[x * 2 + 1]);
    }
  }
  png_read_end(r.png, nullptr);
}

void write_png_gray16(const std::string& path, const std::vector<std::uint16_t>& raw,
                      std::size_t height, std::size_t width) {
  if (raw.size() != height * width)
    throw std::invalid_argument("write_png_gray16: size mismatch");
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) fail("cannot open depth image for writing", path);
  PngWriter w;
  w.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  w.info = png_create_info_struct(w.png);
  if (!w.png || !w.info || setjmp(png_jmpbuf(w.png))) fail("png write error", path);
  png_init_io(w.png, fp.get());
  png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(width),
               static_cast<png_uint_32>(height), 16, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(w.png, w.info);
  std::vector<std::uint8_t> rowbuf(width * 2);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      rowbuf[x * 2] = static_cast<std::uint8_t>(raw[y * width + x] >> 8);
      rowbuf[x * 2 + 1] = static_cast<std::uint8_t>(raw[y * width + x] & 0xff);
    }
    png_write_row(w.png, rowbuf.data());
  }
  png_write_end(w.png, nullptr);
}

void write_png_gray8(const std::string& path, const Map& map) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) fail("cannot open image for writing", path);
  PngWriter w;
  w.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  w.info = png_create_info_struct(w.png);
  if (!w.png || !w.info || setjmp(png_jmpbuf(w.png))) fail("png write error", path);
  png_init_io(w.png, fp.get());
  png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(map.width),
               static_cast<png_uint_32>(map.height), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(w.png, w.info);
  std::vector<std::uint8_t> rowbuf(map.width);
  for (std::size_t y = 0; y < map.height; ++y) {
    for (std::size_t x = 0; x < map.width; ++x) {
      const double v = std::clamp(map.at(y, x), 0.0, 1.0);
      rowbuf[x] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    png_write_row(w.png, rowbuf.data());
  }
  png_write_end(w.png, nullptr);
}

}  // namespace endodepth
