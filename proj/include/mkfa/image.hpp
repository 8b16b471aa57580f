#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mkfa/tensor.hpp"

namespace mkfa {

class ImageFormatError : public std::runtime_error {
 public:
  ImageFormatError(const std::string& what, size_t offset)
      : std::runtime_error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
  size_t offset() const { return offset_; }

 private:
  size_t offset_;
};

/// 8-bit RGB image, interleaved, row-major.
struct RgbImage {
  int64_t width = 0;
  int64_t height = 0;
  std::vector<uint8_t> data;

  RgbImage() = default;
  RgbImage(int64_t w, int64_t h, uint8_t fill = 0)
      : width(w), height(h), data(static_cast<size_t>(w * h * 3), fill) {}

  uint8_t& at(int64_t y, int64_t x, int c) { return data[static_cast<size_t>((y * width + x) * 3 + c)]; }
  uint8_t at(int64_t y, int64_t x, int c) const { return data[static_cast<size_t>((y * width + x) * 3 + c)]; }
  bool operator==(const RgbImage&) const = default;
};

/// Float planes, one per channel, for intermediate image arithmetic.
struct FloatImage {
  int64_t width = 0;
  int64_t height = 0;
  std::vector<double> data;  // c * H * W + y * W + x

  FloatImage() = default;
  FloatImage(int64_t w, int64_t h, double fill = 0.0)
      : width(w), height(h), data(static_cast<size_t>(w * h * 3), fill) {}

  double& at(int64_t y, int64_t x, int c) { return data[static_cast<size_t>((c * height + y) * width + x)]; }
  double at(int64_t y, int64_t x, int c) const { return data[static_cast<size_t>((c * height + y) * width + x)]; }
};

FloatImage to_float(const RgbImage& img);
/// Rounds to nearest and clamps to [0, 255].
RgbImage to_rgb(const FloatImage& img);

std::string encode_ppm(const RgbImage& img);
RgbImage decode_ppm(std::string_view bytes);
void write_ppm(const std::filesystem::path& path, const RgbImage& img);
RgbImage read_ppm(const std::filesystem::path& path);

/// Grayscale (unweighted RGB mean) as H x W doubles.
std::vector<double> grayscale(const RgbImage& img);

/// Stacks same-sized images into an N x 3 x H x W tensor scaled to [-1, 1].
template <typename T>
void images_to_tensor(std::span<const RgbImage* const> images, Tensor<T>& out);

}  // namespace mkfa
