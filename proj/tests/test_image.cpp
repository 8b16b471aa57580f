#include <filesystem>

#include "doctest.h"
#include "mkfa/image.hpp"
#include "mkfa/rng.hpp"

using namespace mkfa;

namespace {

RgbImage random_image(int64_t w, int64_t h, SeededRng& rng) {
  RgbImage img(w, h);
  for (auto& v : img.data) v = static_cast<uint8_t>(rng.below(256));
  return img;
}

std::filesystem::path temp_dir(const char* name) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("ppm write then read is bitwise identical") {
  SeededRng rng(3);
  const auto dir = temp_dir("mkfa_test_image_rt");
  for (auto [w, h] : {std::pair<int64_t, int64_t>{64, 64}, {1, 1}, {17, 5}, {128, 32}}) {
    const RgbImage img = random_image(w, h, rng);
    write_ppm(dir / "a.ppm", img);
    CHECK(read_ppm(dir / "a.ppm") == img);
  }
}

TEST_CASE("64x64 file size follows header arithmetic") {
  SeededRng rng(4);
  const auto dir = temp_dir("mkfa_test_image_size");
  write_ppm(dir / "a.ppm", random_image(64, 64, rng));
  // "P6\n" + "64 64\n" + "255\n" + payload
  const std::string header = std::string("P6\n") + "64" + " " + "64" + "\n" + "255\n";
  CHECK(header.size() == 13);
  CHECK(std::filesystem::file_size(dir / "a.ppm") == header.size() + 64 * 64 * 3);
  CHECK(std::filesystem::file_size(dir / "a.ppm") == 12301);
}

TEST_CASE("decoder handles comments and whitespace") {
  std::string bytes = "P6 # made by hand\n2\t1\n# another\n255\n";
  bytes += std::string("\x01\x02\x03\x04\x05\x06", 6);
  const RgbImage img = decode_ppm(bytes);
  CHECK(img.width == 2);
  CHECK(img.height == 1);
  CHECK(img.at(0, 1, 2) == 6);
}

TEST_CASE("malformed headers report the offset") {
  SUBCASE("bad magic") {
    try {
      decode_ppm("P3\n1 1\n255\nabc");
      FAIL("expected error");
    } catch (const ImageFormatError& e) {
      CHECK(e.offset() == 0);
      CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
    }
  }
  SUBCASE("bad maxval") {
    try {
      decode_ppm("P6\n1 1\n65535\nabcdef");
      FAIL("expected error");
    } catch (const ImageFormatError& e) {
      CHECK(e.offset() == 7);
    }
  }
  SUBCASE("truncated payload") {
    CHECK_THROWS_AS(decode_ppm("P6\n2 2\n255\nabc"), ImageFormatError);
  }
  SUBCASE("missing width") {
    CHECK_THROWS_AS(decode_ppm("P6\n"), ImageFormatError);
  }
}

TEST_CASE("float conversion rounds and clamps") {
  FloatImage f(2, 1);
  f.at(0, 0, 0) = -4.0;
  f.at(0, 1, 0) = 300.0;
  f.at(0, 0, 1) = 12.4;
  f.at(0, 1, 1) = 12.6;
  const RgbImage img = to_rgb(f);
  CHECK(img.at(0, 0, 0) == 0);
  CHECK(img.at(0, 1, 0) == 255);
  CHECK(img.at(0, 0, 1) == 12);
  CHECK(img.at(0, 1, 1) == 13);
  SeededRng rng(5);
  const RgbImage r = random_image(9, 7, rng);
  CHECK(to_rgb(to_float(r)) == r);
}

TEST_CASE("grayscale and tensor conversion") {
  RgbImage img(2, 1);
  img.at(0, 0, 0) = 30;
  img.at(0, 0, 1) = 60;
  img.at(0, 0, 2) = 90;
  img.at(0, 1, 0) = 255;
  img.at(0, 1, 1) = 255;
  img.at(0, 1, 2) = 255;
  const auto g = grayscale(img);
  CHECK(g[0] == doctest::Approx(60.0));
  CHECK(g[1] == doctest::Approx(255.0));
  const RgbImage* batch[] = {&img, &img};
  Tensor64 t;
  images_to_tensor<double>(batch, t);
  CHECK(t.shape() == Shape{2, 3, 1, 2});
  CHECK(t(1, 2, 0, 1) == 1.0);
  CHECK(t(0, 0, 0, 0) == doctest::Approx(30.0 / 127.5 - 1.0));
}
