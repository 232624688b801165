#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "tic/tensor.hpp"

namespace tic {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit RGB image, interleaved row-major.
struct ImageBuffer {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  ImageBuffer() = default;
  ImageBuffer(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 0) {}

  std::uint8_t& at(int row, int col, int ch) { return pixels[(static_cast<std::size_t>(row) * width + col) * 3 + ch]; }
  std::uint8_t at(int row, int col, int ch) const {
    return pixels[(static_cast<std::size_t>(row) * width + col) * 3 + ch];
  }

  /// [1,3,H,W] with values pixel/255.
  Tensor to_tensor() const;
  /// Clamps to [0,1] and rounds to the nearest 8-bit level.
  static ImageBuffer from_tensor(const Tensor& x);
};

ImageBuffer read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const ImageBuffer& img);
/// Single-channel 8-bit map, row-major.
void write_pgm(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& gray);

/// True when the build includes PNG support.
bool png_supported();
ImageBuffer read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const ImageBuffer& img);

/// Dispatches on the extension (.ppm, .png).
ImageBuffer read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const ImageBuffer& img);

struct PaddedImage {
  ImageBuffer image;
  int height = 0;  // original extents
  int width = 0;
};

/// Reflects right and bottom borders (mirror without edge repetition) up to
/// the next multiple of `multiple`.
PaddedImage pad_reflect(const ImageBuffer& img, int multiple = 64);
ImageBuffer crop_back(const ImageBuffer& img, int height, int width);

}  // namespace tic
