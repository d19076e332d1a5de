#include "udaseg/png_io.hpp"

#include <cstdio>
#include <cstring>
#include <memory>
#include <string>

#include <png.h>

#include "udaseg/errors.hpp"

namespace udaseg::png {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

File open(const std::filesystem::path& path, const char* mode) {
  File f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  return f;
}

void write_rows(const std::filesystem::path& path, int width, int height, int bit_depth,
                int color_type, const std::vector<png_bytep>& rows) {
  auto file = open(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng allocation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing '" + path.string() + "'");
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
               bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);
  png_write_image(png, const_cast<png_bytepp>(rows.data()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_gray16(const std::filesystem::path& path, int width, int height,
                  const std::vector<uint16_t>& pixels) {
  if (pixels.size() != static_cast<std::size_t>(width) * height) throw DimensionError("png size");
  std::vector<uint16_t> copy = pixels;
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) {
    rows[y] = reinterpret_cast<png_bytep>(copy.data() + static_cast<std::size_t>(y) * width);
  }
  // png_set_swap makes libpng take host little-endian samples.
  write_rows(path, width, height, 16, PNG_COLOR_TYPE_GRAY, rows);
}

void write_gray8(const std::filesystem::path& path, int width, int height,
                 const std::vector<uint8_t>& pixels) {
  if (pixels.size() != static_cast<std::size_t>(width) * height) throw DimensionError("png size");
  std::vector<uint8_t> copy = pixels;
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) rows[y] = copy.data() + static_cast<std::size_t>(y) * width;
  write_rows(path, width, height, 8, PNG_COLOR_TYPE_GRAY, rows);
}

void write_rgb8(const std::filesystem::path& path, int width, int height,
                const std::vector<uint8_t>& rgb) {
  if (rgb.size() != static_cast<std::size_t>(width) * height * 3) throw DimensionError("png size");
  std::vector<uint8_t> copy = rgb;
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) rows[y] = copy.data() + static_cast<std::size_t>(y) * width * 3;
  write_rows(path, width, height, 8, PNG_COLOR_TYPE_RGB, rows);
}

GrayImage read_gray(const std::filesystem::path& path) {
  auto file = open(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng allocation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("'" + path.string() + "' is not a readable PNG");
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  GrayImage img;
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.bit_depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (color != PNG_COLOR_TYPE_GRAY || (img.bit_depth != 8 && img.bit_depth != 16)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("'" + path.string() + "' is not an 8/16-bit grayscale PNG");
  }
  if (img.bit_depth == 16) png_set_swap(png);
  png_read_update_info(png, info);
  const auto rowbytes = png_get_rowbytes(png, info);
  std::vector<uint8_t> buffer(rowbytes * static_cast<std::size_t>(img.height));
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) rows[y] = buffer.data() + rowbytes * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const auto i = static_cast<std::size_t>(y) * img.width + x;
      if (img.bit_depth == 16) {
        uint16_t v;
        std::memcpy(&v, rows[y] + 2 * x, 2);
        img.pixels[i] = v;
      } else {
        img.pixels[i] = rows[y][x];
      }
    }
  }
  return img;
}

}  // namespace udaseg::png
