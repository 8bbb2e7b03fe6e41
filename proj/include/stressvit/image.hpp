#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "stressvit/tensor.hpp"

namespace stressvit {

// 8-bit RGB raster, row-major triples.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h) : width(w), height(h), rgb(w * h * 3, 0) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return rgb[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const { return rgb[(y * width + x) * 3 + c]; }
  bool operator==(const RgbImage&) const = default;
};

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Binary PPM (P6, maxval 255).
void write_ppm(const RgbImage& image, const std::filesystem::path& path);
RgbImage read_ppm(const std::filesystem::path& path);
std::string encode_ppm(const RgbImage& image);
RgbImage decode_ppm(const std::string& bytes);

// Bilinear resampling of a 2-D [h x w] grid with half-pixel centers
// (align_corners = false); source coordinates are clamped at the borders.
Tensor resize_bilinear(const Tensor& grid, std::size_t out_h, std::size_t out_w);

// Crop [x0, x1) x [y0, y1).
RgbImage crop(const RgbImage& image, std::size_t x0, std::size_t y0, std::size_t x1, std::size_t y1);

}  // namespace stressvit
