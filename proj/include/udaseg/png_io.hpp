#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace udaseg::png {

struct GrayImage {
  int width = 0;
  int height = 0;
  int bit_depth = 8;            // 8 or 16
  std::vector<uint16_t> pixels;  // row-major
};

void write_gray16(const std::filesystem::path& path, int width, int height,
                  const std::vector<uint16_t>& pixels);
void write_gray8(const std::filesystem::path& path, int width, int height,
                 const std::vector<uint8_t>& pixels);
/// Interleaved RGB, 8 bits per channel.
void write_rgb8(const std::filesystem::path& path, int width, int height,
                const std::vector<uint8_t>& rgb);

/// Reads an 8- or 16-bit grayscale PNG. Throws IoError / DataError.
GrayImage read_gray(const std::filesystem::path& path);

}  // namespace udaseg::png
