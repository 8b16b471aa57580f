#include "mkfa/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace mkfa {

FloatImage to_float(const RgbImage& img) {
  FloatImage f(img.width, img.height);
  for (int64_t y = 0; y < img.height; ++y)
    for (int64_t x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) f.at(y, x, c) = img.at(y, x, c);
  return f;
}

RgbImage to_rgb(const FloatImage& img) {
  RgbImage r(img.width, img.height);
  for (int64_t y = 0; y < img.height; ++y)
    for (int64_t x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(std::nearbyint(img.at(y, x, c)), 0.0, 255.0);
        r.at(y, x, c) = static_cast<uint8_t>(v);
      }
  return r;
}

std::string encode_ppm(const RgbImage& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.data.data()), img.data.size());
  return out;
}

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(std::string_view b) : bytes_(b) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  int64_t number(const char* what) {
    skip_space_and_comments();
    const size_t start = pos_;
    int64_t v = 0;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > (int64_t{1} << 31)) throw ImageFormatError(std::string(what) + " too large", start);
      ++pos_;
    }
    if (pos_ == start) throw ImageFormatError(std::string("expected ") + what, start);
    return v;
  }

  size_t pos_ = 0;
  std::string_view bytes_;
};

}  // namespace

RgbImage decode_ppm(std::string_view bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw ImageFormatError("bad magic (expected P6)", 0);
  }
  HeaderReader r(bytes);
  r.pos_ = 2;
  const int64_t w = r.number("width");
  const int64_t h = r.number("height");
  r.skip_space_and_comments();
  const size_t maxval_at = r.pos_;
  const int64_t maxval = r.number("maxval");
  if (maxval != 255) throw ImageFormatError("unsupported maxval " + std::to_string(maxval), maxval_at);
  if (w <= 0 || h <= 0) throw ImageFormatError("zero image extent", maxval_at);
  if (r.pos_ >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[r.pos_]))) {
    throw ImageFormatError("missing whitespace after maxval", r.pos_);
  }
  const size_t payload = r.pos_ + 1;
  const size_t need = static_cast<size_t>(w * h * 3);
  if (bytes.size() - payload < need) {
    throw ImageFormatError("truncated payload: need " + std::to_string(need) + " bytes, have " +
                               std::to_string(bytes.size() - payload),
                           bytes.size());
  }
  RgbImage img(w, h);
  std::copy_n(reinterpret_cast<const uint8_t*>(bytes.data() + payload), need, img.data.begin());
  return img;
}

void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  const std::string s = encode_ppm(img);
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  try {
    return decode_ppm(ss.str());
  } catch (const ImageFormatError& e) {
    throw ImageFormatError(path.string() + ": " + e.what(), e.offset());
  }
}

std::vector<double> grayscale(const RgbImage& img) {
  std::vector<double> g(static_cast<size_t>(img.width * img.height));
  for (int64_t y = 0; y < img.height; ++y)
    for (int64_t x = 0; x < img.width; ++x) {
      g[static_cast<size_t>(y * img.width + x)] =
          (static_cast<double>(img.at(y, x, 0)) + img.at(y, x, 1) + img.at(y, x, 2)) / 3.0;
    }
  return g;
}

template <typename T>
void images_to_tensor(std::span<const RgbImage* const> images, Tensor<T>& out) {
  if (images.empty()) throw std::invalid_argument("images_to_tensor: empty batch");
  const int64_t w = images[0]->width, h = images[0]->height;
  const Shape s{static_cast<int64_t>(images.size()), 3, h, w};
  if (!(out.shape() == s)) out = Tensor<T>(s);
  for (size_t n = 0; n < images.size(); ++n) {
    const RgbImage& img = *images[n];
    if (img.width != w || img.height != h) throw ShapeError("images_to_tensor: mixed image sizes");
    for (int c = 0; c < 3; ++c) {
      T* dst = out.plane(static_cast<int64_t>(n), c);
      for (int64_t i = 0; i < w * h; ++i) {
        dst[i] = static_cast<T>(img.data[static_cast<size_t>(i * 3 + c)] / 127.5 - 1.0);
      }
    }
  }
}

template void images_to_tensor<float>(std::span<const RgbImage* const>, Tensor<float>&);
template void images_to_tensor<double>(std::span<const RgbImage* const>, Tensor<double>&);

}  // namespace mkfa
