#include "mkfa/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "mkfa/parallel.hpp"
#include "mkfa/spectral.hpp"

namespace mkfa {
namespace {

constexpr double kPi = std::numbers::pi;

// 1/f^alpha field with unit variance.
std::vector<double> power_law_noise(int64_t n, double alpha, SeededRng& rng) {
  ComplexGrid g(static_cast<size_t>(n * n));
  for (auto& v : g) v = {rng.normal(), 0.0};
  g = dft2d(std::move(g), n, n, false);
  for (int64_t y = 0; y < n; ++y)
    for (int64_t x = 0; x < n; ++x) {
      const double fy = static_cast<double>(y <= n / 2 ? y : y - n);
      const double fx = static_cast<double>(x <= n / 2 ? x : x - n);
      const double f = std::hypot(fx, fy) / static_cast<double>(n);
      g[static_cast<size_t>(y * n + x)] *= f > 0 ? std::pow(f, -alpha) : 0.0;
    }
  g = dft2d(std::move(g), n, n, true);
  std::vector<double> out(g.size());
  double ss = 0.0;
  for (size_t i = 0; i < g.size(); ++i) {
    out[i] = g[i].real();
    ss += out[i] * out[i];
  }
  const double sd = std::sqrt(ss / static_cast<double>(out.size()));
  for (auto& v : out) v /= sd;
  return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct Ellipse {
  double cy, cx, ry, rx, angle;

  // Normalised radius: < 1 inside.
  double rho(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (c * dx + s * dy) / rx, v = (-s * dx + c * dy) / ry;
    return std::sqrt(u * u + v * v);
  }
};

Ellipse random_ellipse(SeededRng& rng, double n, double min_r, double max_r, double jitter) {
  Ellipse e;
  e.cy = n * (0.5 + rng.uniform(-jitter, jitter));
  e.cx = n * (0.5 + rng.uniform(-jitter, jitter));
  e.ry = n * rng.uniform(min_r, max_r);
  e.rx = n * rng.uniform(min_r, max_r);
  e.angle = rng.uniform(0.0, kPi);
  return e;
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[static_cast<size_t>(i + radius)];
  }
  for (auto& v : k) v /= sum;
  return k;
}

FloatImage blur_float(const FloatImage& img, double sigma) {
  if (sigma <= 0.0) return img;
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  const int64_t w = img.width, h = img.height;
  FloatImage tmp(w, h), out(w, h);
  for (int c = 0; c < 3; ++c) {
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += k[static_cast<size_t>(i + r)] * img.at(y, std::clamp<int64_t>(x + i, 0, w - 1), c);
        tmp.at(y, x, c) = acc;
      }
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += k[static_cast<size_t>(i + r)] * tmp.at(std::clamp<int64_t>(y + i, 0, h - 1), x, c);
        out.at(y, x, c) = acc;
      }
  }
  return out;
}

const int kLuminanceQuant[64] = {16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
                                 14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
                                 18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
                                 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

}  // namespace

const char* to_string(ArtifactKind k) {
  switch (k) {
    case ArtifactKind::splice:
      return "splice";
    case ArtifactKind::grid:
      return "grid";
    case ArtifactKind::smooth:
      return "smooth";
    case ArtifactKind::spectral_peak:
      return "spectral_peak";
  }
  return "?";
}

ArtifactKind parse_artifact_kind(const std::string& s) {
  for (auto k : kAllArtifactKinds) {
    if (s == to_string(k)) return k;
  }
  throw std::invalid_argument("unknown artifact kind: " + s);
}

void GeneratorSpec::validate() const {
  if (image_size != 32 && image_size != 64 && image_size != 128 && image_size != 256) {
    throw std::invalid_argument("image_size must be one of 32, 64, 128, 256");
  }
  if (blob_min < 0 || blob_max < blob_min) throw std::invalid_argument("blob count range is invalid");
  if (!(alpha > 0.0)) throw std::invalid_argument("alpha must be positive");
  if (!(noise_std >= 0.0)) throw std::invalid_argument("noise_std must be non-negative");
  if (!(sensor_noise_std >= 0.0)) throw std::invalid_argument("sensor_noise_std must be non-negative");
  if (!(intensity > 0.0 && intensity <= 1.0)) throw std::invalid_argument("intensity must be in (0, 1]");
}

void to_json(nlohmann::json& j, const GeneratorSpec& s) {
  j = {{"image_size", s.image_size}, {"blob_min", s.blob_min},   {"blob_max", s.blob_max}, {"alpha", s.alpha},
       {"noise_std", s.noise_std},   {"sensor_noise_std", s.sensor_noise_std},
       {"intensity", s.intensity}, {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, GeneratorSpec& s) {
  GeneratorSpec d;
  s.image_size = j.value("image_size", d.image_size);
  s.blob_min = j.value("blob_min", d.blob_min);
  s.blob_max = j.value("blob_max", d.blob_max);
  s.alpha = j.value("alpha", d.alpha);
  s.noise_std = j.value("noise_std", d.noise_std);
  s.sensor_noise_std = j.value("sensor_noise_std", d.sensor_noise_std);
  s.intensity = j.value("intensity", d.intensity);
  s.seed = j.value("seed", d.seed);
}

RgbImage gen_real(const GeneratorSpec& spec, SeededRng& rng) {
  spec.validate();
  const int64_t n = spec.image_size;
  const double nd = static_cast<double>(n);
  FloatImage img(n, n);
  double bg[3], face[3];
  for (int c = 0; c < 3; ++c) bg[c] = rng.uniform(70.0, 150.0);
  const double skin = rng.uniform(120.0, 190.0);
  face[0] = skin + 20.0;
  face[1] = skin;
  face[2] = skin - 25.0;
  const Ellipse oval = random_ellipse(rng, nd, 0.25, 0.36, 0.06);
  const double softness = 0.12;
  for (int64_t y = 0; y < n; ++y)
    for (int64_t x = 0; x < n; ++x) {
      const double m = sigmoid((1.0 - oval.rho(y + 0.5, x + 0.5)) / softness);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = bg[c] + m * (face[c] - bg[c]);
    }
  const int blobs = spec.blob_min + static_cast<int>(rng.below(static_cast<uint64_t>(spec.blob_max - spec.blob_min + 1)));
  for (int b = 0; b < blobs; ++b) {
    const double cy = rng.uniform(0.0, nd), cx = rng.uniform(0.0, nd);
    const double s = nd * rng.uniform(0.04, 0.12);
    double amp[3];
    const double base = rng.uniform(-35.0, 35.0);
    for (int c = 0; c < 3; ++c) amp[c] = base + rng.uniform(-8.0, 8.0);
    for (int64_t y = 0; y < n; ++y)
      for (int64_t x = 0; x < n; ++x) {
        const double d2 = ((y - cy) * (y - cy) + (x - cx) * (x - cx)) / (2.0 * s * s);
        if (d2 > 20.0) continue;
        const double g = std::exp(-d2);
        for (int c = 0; c < 3; ++c) img.at(y, x, c) += amp[c] * g;
      }
  }
  const auto noise = power_law_noise(n, spec.alpha, rng);
  const double tint[3] = {1.0, rng.uniform(0.9, 1.0), rng.uniform(0.8, 1.0)};
  for (int64_t y = 0; y < n; ++y)
    for (int64_t x = 0; x < n; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) += spec.noise_std * tint[c] * noise[static_cast<size_t>(y * n + x)] +
                           spec.sensor_noise_std * rng.normal();
  return to_rgb(img);
}

RgbImage gen_fake(const RgbImage& real, ArtifactKind kind, double intensity, const GeneratorSpec& spec,
                  SeededRng& rng) {
  if (!(intensity > 0.0 && intensity <= 1.0)) throw std::invalid_argument("intensity must be in (0, 1]");
  const int64_t n = real.width;
  const double nd = static_cast<double>(n);
  const FloatImage src = to_float(real);
  FloatImage out = src;
  switch (kind) {
    case ArtifactKind::splice: {
      GeneratorSpec donor_spec = spec;
      donor_spec.image_size = n;
      const FloatImage donor = blur_float(to_float(gen_real(donor_spec, rng)), rng.uniform(0.7, 1.0));
      const Ellipse e = random_ellipse(rng, nd, 0.25, 0.4, 0.1);
      const double shift = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(15.0, 35.0);
      for (int64_t y = 0; y < n; ++y)
        for (int64_t x = 0; x < n; ++x) {
          if (e.rho(y + 0.5, x + 0.5) >= 1.0) continue;
          for (int c = 0; c < 3; ++c) {
            out.at(y, x, c) += intensity * (donor.at(y, x, c) + shift - src.at(y, x, c));
          }
        }
      break;
    }
    case ArtifactKind::grid: {
      const double a2 = 7.0 * rng.uniform(0.8, 1.2), a4 = 5.0 * rng.uniform(0.8, 1.2);
      const int64_t ox = static_cast<int64_t>(rng.below(4)), oy = static_cast<int64_t>(rng.below(4));
      const Ellipse e = random_ellipse(rng, nd, 0.25, 0.4, 0.1);
      for (int64_t y = 0; y < n; ++y)
        for (int64_t x = 0; x < n; ++x) {
          const double m = sigmoid((1.0 - e.rho(y + 0.5, x + 0.5)) / 0.08);
          const double p2 = ((x + y) % 2 == 0) ? 1.0 : -1.0;
          const double p4 = (((x + ox) / 2 + (y + oy) / 2) % 2 == 0) ? 1.0 : -1.0;
          for (int c = 0; c < 3; ++c) out.at(y, x, c) += intensity * m * (a2 * p2 + a4 * p4);
        }
      break;
    }
    case ArtifactKind::smooth: {
      const FloatImage blurred = blur_float(src, rng.uniform(1.5, 2.5));
      const Ellipse e = random_ellipse(rng, nd, 0.3, 0.45, 0.08);
      for (int64_t y = 0; y < n; ++y)
        for (int64_t x = 0; x < n; ++x) {
          const double m = sigmoid((1.0 - e.rho(y + 0.5, x + 0.5)) / 0.08);
          for (int c = 0; c < 3; ++c) out.at(y, x, c) += intensity * m * (blurred.at(y, x, c) - src.at(y, x, c));
        }
      break;
    }
    case ArtifactKind::spectral_peak: {
      // Fixed frequencies in cycles per pixel, all beyond half the radial range.
      const double freqs[3][2] = {{0.375, 0.28125}, {-0.3125, 0.4375}, {0.46875, -0.125}};
      double phase[3], amp[3];
      for (int k = 0; k < 3; ++k) {
        phase[k] = rng.uniform(0.0, 2.0 * kPi);
        amp[k] = 9.0 * rng.uniform(0.8, 1.2);
      }
      const Ellipse e = random_ellipse(rng, nd, 0.25, 0.4, 0.1);
      for (int64_t y = 0; y < n; ++y)
        for (int64_t x = 0; x < n; ++x) {
          const double m = sigmoid((1.0 - e.rho(y + 0.5, x + 0.5)) / 0.08);
          double v = 0.0;
          for (int k = 0; k < 3; ++k) v += amp[k] * std::cos(2.0 * kPi * (freqs[k][0] * x + freqs[k][1] * y) + phase[k]);
          for (int c = 0; c < 3; ++c) out.at(y, x, c) += intensity * m * v;
        }
      break;
    }
  }
  return to_rgb(out);
}

RgbImage hflip(const RgbImage& img) {
  RgbImage out(img.width, img.height);
  for (int64_t y = 0; y < img.height; ++y)
    for (int64_t x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, img.width - 1 - x, c) = img.at(y, x, c);
  return out;
}

RgbImage rotate(const RgbImage& img, double degrees) {
  if (!(degrees >= -15.0 && degrees <= 15.0)) throw std::invalid_argument("rotation must be within [-15, 15] degrees");
  const double t = degrees * kPi / 180.0, cs = std::cos(t), sn = std::sin(t);
  const double cy = (static_cast<double>(img.height) - 1.0) / 2.0, cx = (static_cast<double>(img.width) - 1.0) / 2.0;
  const FloatImage src = to_float(img);
  FloatImage out(img.width, img.height);
  for (int64_t y = 0; y < img.height; ++y)
    for (int64_t x = 0; x < img.width; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double sx = std::clamp(cx + cs * dx + sn * dy, 0.0, static_cast<double>(img.width - 1));
      const double sy = std::clamp(cy - sn * dx + cs * dy, 0.0, static_cast<double>(img.height - 1));
      const auto x0 = static_cast<int64_t>(std::floor(sx)), y0 = static_cast<int64_t>(std::floor(sy));
      const int64_t x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
      const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
      for (int c = 0; c < 3; ++c) {
        const double top = src.at(y0, x0, c) * (1 - fx) + src.at(y0, x1, c) * fx;
        const double bot = src.at(y1, x0, c) * (1 - fx) + src.at(y1, x1, c) * fx;
        out.at(y, x, c) = top * (1 - fy) + bot * fy;
      }
    }
  return to_rgb(out);
}

RgbImage gaussian_blur(const RgbImage& img, double sigma) {
  if (!(sigma >= 0.0 && sigma <= 3.0)) throw std::invalid_argument("blur sigma must be within [0, 3]");
  if (sigma == 0.0) return img;
  return to_rgb(blur_float(to_float(img), sigma));
}

RgbImage brightness_contrast(const RgbImage& img, double brightness, double contrast) {
  if (!(brightness >= -1.0 && brightness <= 1.0)) throw std::invalid_argument("brightness must be within [-1, 1]");
  if (!(contrast >= 0.0 && contrast <= 3.0)) throw std::invalid_argument("contrast must be within [0, 3]");
  FloatImage f = to_float(img);
  for (auto& v : f.data) v = contrast * (v - 127.5) + 127.5 + 255.0 * brightness;
  return to_rgb(f);
}

RgbImage block_dct_compress(const RgbImage& img, int quality) {
  if (quality < 10 || quality > 100) throw std::invalid_argument("quality must be within [10, 100]");
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  double q[64];
  for (int i = 0; i < 64; ++i) q[i] = std::clamp((kLuminanceQuant[i] * scale + 50) / 100, 1, 255);
  double basis[8][8];
  for (int k = 0; k < 8; ++k)
    for (int i = 0; i < 8; ++i) {
      const double a = k == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      basis[k][i] = a * std::cos((2 * i + 1) * k * kPi / 16.0);
    }
  const FloatImage src = to_float(img);
  FloatImage out(img.width, img.height);
  for (int c = 0; c < 3; ++c)
    for (int64_t by = 0; by < img.height; by += 8)
      for (int64_t bx = 0; bx < img.width; bx += 8) {
        double block[8][8], coef[8][8], tmp[8][8];
        for (int i = 0; i < 8; ++i)
          for (int j = 0; j < 8; ++j) {
            block[i][j] = src.at(std::min(by + i, img.height - 1), std::min(bx + j, img.width - 1), c) - 128.0;
          }
        for (int u = 0; u < 8; ++u)
          for (int j = 0; j < 8; ++j) {
            double a = 0;
            for (int i = 0; i < 8; ++i) a += basis[u][i] * block[i][j];
            tmp[u][j] = a;
          }
        for (int u = 0; u < 8; ++u)
          for (int v = 0; v < 8; ++v) {
            double a = 0;
            for (int j = 0; j < 8; ++j) a += tmp[u][j] * basis[v][j];
            coef[u][v] = std::nearbyint(a / q[u * 8 + v]) * q[u * 8 + v];
          }
        for (int i = 0; i < 8; ++i)
          for (int v = 0; v < 8; ++v) {
            double a = 0;
            for (int u = 0; u < 8; ++u) a += basis[u][i] * coef[u][v];
            tmp[i][v] = a;
          }
        for (int i = 0; i < 8 && by + i < img.height; ++i)
          for (int j = 0; j < 8 && bx + j < img.width; ++j) {
            double a = 0;
            for (int v = 0; v < 8; ++v) a += tmp[i][v] * basis[v][j];
            out.at(by + i, bx + j, c) = a + 128.0;
          }
      }
  return to_rgb(out);
}

AugmentPolicy AugmentPolicy::none() {
  AugmentPolicy p;
  p.p_hflip = 0.0;
  return p;
}

AugmentPolicy AugmentPolicy::full() {
  AugmentPolicy p;
  p.p_rotate = 0.3;
  p.p_blur = 0.2;
  p.p_brightness_contrast = 0.3;
  p.p_compress = 0.2;
  return p;
}

void to_json(nlohmann::json& j, const AugmentPolicy& p) {
  j = {{"p_hflip", p.p_hflip},
       {"p_rotate", p.p_rotate},
       {"max_rotate_deg", p.max_rotate_deg},
       {"p_blur", p.p_blur},
       {"max_blur_sigma", p.max_blur_sigma},
       {"p_brightness_contrast", p.p_brightness_contrast},
       {"max_brightness", p.max_brightness},
       {"max_contrast_delta", p.max_contrast_delta},
       {"p_compress", p.p_compress},
       {"min_quality", p.min_quality}};
}

void from_json(const nlohmann::json& j, AugmentPolicy& p) {
  AugmentPolicy d;
  p.p_hflip = j.value("p_hflip", d.p_hflip);
  p.p_rotate = j.value("p_rotate", d.p_rotate);
  p.max_rotate_deg = j.value("max_rotate_deg", d.max_rotate_deg);
  p.p_blur = j.value("p_blur", d.p_blur);
  p.max_blur_sigma = j.value("max_blur_sigma", d.max_blur_sigma);
  p.p_brightness_contrast = j.value("p_brightness_contrast", d.p_brightness_contrast);
  p.max_brightness = j.value("max_brightness", d.max_brightness);
  p.max_contrast_delta = j.value("max_contrast_delta", d.max_contrast_delta);
  p.p_compress = j.value("p_compress", d.p_compress);
  p.min_quality = j.value("min_quality", d.min_quality);
}

RgbImage augment(const RgbImage& img, const AugmentPolicy& p, SeededRng& rng) {
  // Every draw happens regardless of which ops fire, so the stream position
  // does not depend on earlier outcomes.
  const double u_flip = rng.uniform(), u_rot = rng.uniform(), u_blur = rng.uniform(), u_bc = rng.uniform(),
               u_q = rng.uniform();
  const double rot = rng.uniform(-p.max_rotate_deg, p.max_rotate_deg);
  const double sigma = rng.uniform(0.0, p.max_blur_sigma);
  const double b = rng.uniform(-p.max_brightness, p.max_brightness);
  const double c = 1.0 + rng.uniform(-p.max_contrast_delta, p.max_contrast_delta);
  const int q = p.min_quality + static_cast<int>(rng.below(static_cast<uint64_t>(101 - p.min_quality)));
  RgbImage out = img;
  if (u_flip < p.p_hflip) out = hflip(out);
  if (u_rot < p.p_rotate) out = rotate(out, rot);
  if (u_blur < p.p_blur) out = gaussian_blur(out, sigma);
  if (u_bc < p.p_brightness_contrast) out = brightness_contrast(out, b, c);
  if (u_q < p.p_compress) out = block_dct_compress(out, q);
  return out;
}

int64_t Manifest::count(int label, const std::string& split) const {
  return std::count_if(samples.begin(), samples.end(), [&](const SampleRecord& r) {
    return r.label == label && (split.empty() || r.split == split);
  });
}

std::vector<const SampleRecord*> Manifest::select(const std::string& split) const {
  std::vector<const SampleRecord*> out;
  for (const auto& r : samples) {
    if (split.empty() || r.split == split) out.push_back(&r);
  }
  return out;
}

nlohmann::json Manifest::to_json() const {
  nlohmann::json j;
  j["version"] = version;
  j["spec"] = spec;
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : samples) {
    arr.push_back({{"path", r.path},
                   {"label", r.label},
                   {"kind", r.kind ? nlohmann::json(to_string(*r.kind)) : nlohmann::json(nullptr)},
                   {"split", r.split},
                   {"seed_index", r.seed_index}});
  }
  j["samples"] = arr;
  j["counts"] = {{"real", count(0)},
                 {"fake", count(1)},
                 {"train_real", count(0, "train")},
                 {"train_fake", count(1, "train")},
                 {"test_real", count(0, "test")},
                 {"test_fake", count(1, "test")}};
  return j;
}

Manifest Manifest::from_json(const nlohmann::json& j) {
  Manifest m;
  m.version = j.at("version").get<int>();
  if (m.version != 1) throw std::runtime_error("unsupported manifest version " + std::to_string(m.version));
  m.spec = j.at("spec").get<GeneratorSpec>();
  for (const auto& s : j.at("samples")) {
    SampleRecord r;
    r.path = s.at("path").get<std::string>();
    r.label = s.at("label").get<int>();
    if (r.label != 0 && r.label != 1) throw std::runtime_error("sample label must be 0 or 1: " + r.path);
    if (!s.at("kind").is_null()) r.kind = parse_artifact_kind(s.at("kind").get<std::string>());
    if ((r.label == 1) != r.kind.has_value()) throw std::runtime_error("label/kind mismatch for " + r.path);
    r.split = s.at("split").get<std::string>();
    if (r.split != "train" && r.split != "test") throw std::runtime_error("unknown split '" + r.split + "'");
    r.seed_index = s.at("seed_index").get<uint64_t>();
    m.samples.push_back(std::move(r));
  }
  if (j.contains("counts")) {
    const auto& c = j.at("counts");
    if (c.value("real", m.count(0)) != m.count(0) || c.value("fake", m.count(1)) != m.count(1)) {
      throw std::runtime_error("manifest counts do not match its sample list");
    }
  }
  return m;
}

void Manifest::save(const std::filesystem::path& dir) const {
  std::ofstream f(dir / "manifest.json", std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  f << to_json().dump(1) << '\n';
}

Manifest Manifest::load(const std::filesystem::path& dir) {
  const auto path = std::filesystem::is_directory(dir) ? dir / "manifest.json" : dir;
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  Manifest m = from_json(nlohmann::json::parse(f));
  m.root = path.parent_path();
  for (const auto& r : m.samples) {
    if (!std::filesystem::exists(m.root / r.path)) throw std::runtime_error("missing image " + (m.root / r.path).string());
  }
  return m;
}

RgbImage generate_sample(const GeneratorSpec& spec, int label, std::optional<ArtifactKind> kind, uint64_t seed_index) {
  SeededRng rng = SeededRng(spec.seed).split(seed_index);
  RgbImage base = gen_real(spec, rng);
  if (label == 0) return base;
  if (!kind) throw std::invalid_argument("fake sample needs an artifact kind");
  return gen_fake(base, *kind, spec.intensity, spec, rng);
}

Manifest gen_corpus(const GeneratorSpec& spec, int64_t n_real, int64_t n_fake, double test_fraction,
                    const std::filesystem::path& out_dir) {
  spec.validate();
  if (n_real <= 0 || n_fake <= 0) throw std::invalid_argument("n_real and n_fake must be positive");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw std::invalid_argument("test fraction must be in [0, 1)");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw std::runtime_error("cannot create output directory " + out_dir.string());
  }
  Manifest m;
  m.spec = spec;
  m.root = out_dir;
  auto add_class = [&](int label, int64_t count, uint64_t first_index) {
    const int64_t n_test = static_cast<int64_t>(std::llround(static_cast<double>(count) * test_fraction));
    for (int64_t i = 0; i < count; ++i) {
      SampleRecord r;
      r.seed_index = first_index + static_cast<uint64_t>(i);
      char name[32];
      std::snprintf(name, sizeof(name), "%06llu.ppm", static_cast<unsigned long long>(r.seed_index));
      r.path = name;
      r.label = label;
      if (label == 1) r.kind = kAllArtifactKinds[static_cast<size_t>(i % 4)];
      r.split = i < count - n_test ? "train" : "test";
      m.samples.push_back(std::move(r));
    }
  };
  add_class(0, n_real, 0);
  add_class(1, n_fake, static_cast<uint64_t>(n_real));
  parallel_for(static_cast<int64_t>(m.samples.size()), [&](int64_t i) {
    const auto& r = m.samples[static_cast<size_t>(i)];
    write_ppm(out_dir / r.path, generate_sample(spec, r.label, r.kind, r.seed_index));
  });
  m.save(out_dir);
  return m;
}

}  // namespace mkfa
