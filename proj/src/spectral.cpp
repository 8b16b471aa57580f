#include "mkfa/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace mkfa {
namespace {

using cd = std::complex<double>;

bool is_pow2(int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

void dft_direct_1d(std::vector<cd>& a) {
  const size_t n = a.size();
  std::vector<cd> out(n);
  std::vector<cd> roots(n);
  for (size_t k = 0; k < n; ++k) {
    roots[k] = std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n));
  }
  for (size_t k = 0; k < n; ++k) {
    cd acc = 0.0;
    for (size_t j = 0; j < n; ++j) acc += a[j] * roots[(k * j) % n];
    out[k] = acc;
  }
  a.swap(out);
}

void fft_1d(std::vector<cd>& a) {
  const size_t n = a.size();
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const size_t half = len / 2;
    std::vector<cd> w(half);
    for (size_t k = 0; k < half; ++k) {
      w[k] = std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(len));
    }
    for (size_t i = 0; i < n; i += len) {
      for (size_t k = 0; k < half; ++k) {
        const cd u = a[i + k];
        const cd v = a[i + k + half] * w[k];
        a[i + k] = u + v;
        a[i + k + half] = u - v;
      }
    }
  }
}

template <class Transform1d>
ComplexGrid separable(ComplexGrid g, int64_t h, int64_t w, Transform1d rows, Transform1d cols) {
  std::vector<cd> line;
  line.resize(static_cast<size_t>(w));
  for (int64_t y = 0; y < h; ++y) {
    std::copy_n(g.begin() + y * w, w, line.begin());
    rows(line);
    std::copy(line.begin(), line.end(), g.begin() + y * w);
  }
  line.resize(static_cast<size_t>(h));
  for (int64_t x = 0; x < w; ++x) {
    for (int64_t y = 0; y < h; ++y) line[static_cast<size_t>(y)] = g[static_cast<size_t>(y * w + x)];
    cols(line);
    for (int64_t y = 0; y < h; ++y) g[static_cast<size_t>(y * w + x)] = line[static_cast<size_t>(y)];
  }
  return g;
}

void check_plane(const Plane& map) {
  if (map.height < 1 || map.width < 1 || map.v.size() != static_cast<size_t>(map.height * map.width)) {
    throw std::invalid_argument("invalid plane " + std::to_string(map.height) + "x" + std::to_string(map.width));
  }
}

}  // namespace

ComplexGrid dft2d_direct(const Plane& map) {
  check_plane(map);
  return separable(ComplexGrid(map.v.begin(), map.v.end()), map.height, map.width, dft_direct_1d, dft_direct_1d);
}

ComplexGrid dft2d(ComplexGrid grid, int64_t height, int64_t width, bool inverse) {
  if (height < 1 || width < 1 || grid.size() != static_cast<size_t>(height * width)) {
    throw std::invalid_argument("dft2d: grid size does not match " + std::to_string(height) + "x" +
                                std::to_string(width));
  }
  auto pick = [](int64_t n) { return is_pow2(n) ? fft_1d : dft_direct_1d; };
  if (inverse) {
    for (auto& v : grid) v = std::conj(v);
  }
  grid = separable(std::move(grid), height, width, pick(width), pick(height));
  if (inverse) {
    const double scale = 1.0 / static_cast<double>(height * width);
    for (auto& v : grid) v = std::conj(v) * scale;
  }
  return grid;
}

ComplexGrid dft2d(const Plane& map) {
  check_plane(map);
  return dft2d(ComplexGrid(map.v.begin(), map.v.end()), map.height, map.width, false);
}

Plane amplitude_spectrum(const Plane& map) {
  const ComplexGrid g = dft2d(map);
  const int64_t h = map.height, w = map.width;
  Plane out(h, w);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      out.at((y + h / 2) % h, (x + w / 2) % w) = std::abs(g[static_cast<size_t>(y * w + x)]);
    }
  return out;
}

RadialProfile radial_profile(const Plane& amplitude, int bins) {
  check_plane(amplitude);
  if (bins < 2) throw std::invalid_argument("radial_profile needs at least 2 bins");
  const int64_t h = amplitude.height, w = amplitude.width;
  const double cy = static_cast<double>(h / 2), cx = static_cast<double>(w / 2);
  const double ry = std::max(cy, static_cast<double>(h - 1) - cy);
  const double rx = std::max(cx, static_cast<double>(w - 1) - cx);
  const double r_max = std::hypot(ry, rx);
  RadialProfile p;
  p.value.assign(static_cast<size_t>(bins), 0.0);
  p.count.assign(static_cast<size_t>(bins), 0);
  p.empty.assign(static_cast<size_t>(bins), false);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const double rn = r_max > 0 ? std::hypot(y - cy, x - cx) / r_max : 0.0;
      const auto b = std::min(static_cast<int64_t>(std::floor(rn * bins)), static_cast<int64_t>(bins - 1));
      p.value[static_cast<size_t>(b)] += amplitude.at(y, x);
      ++p.count[static_cast<size_t>(b)];
    }
  for (int b = 0; b < bins; ++b) {
    const auto i = static_cast<size_t>(b);
    p.freq.push_back((b + 0.5) / bins);
    if (p.count[i] > 0) {
      p.value[i] /= static_cast<double>(p.count[i]);
    } else {
      p.empty[i] = true;
      p.value[i] = b > 0 ? p.value[i - 1] : 0.0;
    }
  }
  return p;
}

std::vector<double> relative_log_amplitude(std::span<const double> profile, double eps) {
  if (profile.empty()) throw std::invalid_argument("relative_log_amplitude: empty profile");
  if (std::all_of(profile.begin(), profile.end(), [](double v) { return v == 0.0; })) {
    throw std::invalid_argument("relative_log_amplitude: all-zero profile");
  }
  if (!(profile[0] > 0.0)) throw std::invalid_argument("relative_log_amplitude: bin-0 amplitude must be positive");
  const double base = std::log(profile[0] + eps);
  std::vector<double> out;
  out.reserve(profile.size());
  for (double v : profile) out.push_back(std::log(v + eps) - base);
  out[0] = 0.0;
  return out;
}

const std::vector<double>& SpectrumReport::at(const std::string& name) const {
  for (const auto& [n, s] : series) {
    if (n == name) return s;
  }
  throw std::out_of_range("no spectrum series named '" + name + "'");
}

bool SpectrumReport::has(const std::string& name) const {
  return std::any_of(series.begin(), series.end(), [&](const auto& s) { return s.first == name; });
}

double SpectrumReport::band_mean(const std::string& name, double threshold) const {
  const auto& s = at(name);
  double acc = 0.0;
  int n = 0;
  for (size_t b = 0; b < freq.size(); ++b) {
    if (freq[b] > threshold) {
      acc += s[b];
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("no bins above threshold");
  return acc / n;
}

std::string SpectrumReport::to_csv() const {
  std::ostringstream out;
  out.imbue(std::locale::classic());
  out << "bin,freq";
  for (const auto& [name, s] : series) out << ',' << name;
  out << '\n' << std::setprecision(10);
  for (size_t b = 0; b < freq.size(); ++b) {
    out << b << ',' << freq[b];
    for (const auto& [name, s] : series) out << ',' << s[b];
    out << '\n';
  }
  return out.str();
}

void SpectrumReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << to_csv();
}

SpectrumReport corpus_spectrum_stats(std::span<const SpectrumSample> samples, int bins) {
  if (samples.empty()) throw std::invalid_argument("corpus_spectrum_stats: empty selection");
  struct Acc {
    std::vector<double> sum;
    int64_t n = 0;
  };
  std::map<std::string, Acc> groups;  // "real", "fake", "fake_<kind>"
  SpectrumReport report;
  for (const auto& s : samples) {
    Plane g(s.image->height, s.image->width);
    g.v = grayscale(*s.image);
    const RadialProfile prof = radial_profile(amplitude_spectrum(g), bins);
    if (report.freq.empty()) report.freq = prof.freq;
    const auto rel = relative_log_amplitude(prof.value);
    auto add = [&](const std::string& key) {
      Acc& a = groups[key];
      if (a.sum.empty()) a.sum.assign(rel.size(), 0.0);
      for (size_t b = 0; b < rel.size(); ++b) a.sum[b] += rel[b];
      ++a.n;
    };
    if (s.label == 0) {
      add("real");
    } else {
      add("fake");
      if (!s.kind.empty()) add("fake_" + s.kind);
    }
  }
  auto mean = [&](const std::string& key) {
    std::vector<double> m = groups.at(key).sum;
    for (double& v : m) v /= static_cast<double>(groups.at(key).n);
    return m;
  };
  const bool real = groups.count("real") > 0, fake = groups.count("fake") > 0;
  std::vector<double> real_mean;
  if (real) {
    real_mean = mean("real");
    report.series.emplace_back("real_mean", real_mean);
  }
  if (fake) report.series.emplace_back("fake_mean", mean("fake"));
  if (real && fake) {
    std::vector<double> d = mean("fake");
    for (size_t b = 0; b < d.size(); ++b) d[b] -= real_mean[b];
    report.series.emplace_back("diff", d);
  }
  for (const auto& [key, acc] : groups) {
    if (key.rfind("fake_", 0) != 0) continue;
    const auto m = mean(key);
    report.series.emplace_back(key, m);
    if (real) {
      std::vector<double> d = m;
      for (size_t b = 0; b < d.size(); ++b) d[b] -= real_mean[b];
      report.series.emplace_back("diff_" + key.substr(5), d);
    }
  }
  report.meta["samples"] = samples.size();
  report.meta["bins"] = bins;
  for (const auto& [key, acc] : groups) report.meta["count_" + key] = acc.n;
  return report;
}

template <typename T>
std::vector<double> feature_relative_log_amplitude(const Tensor<T>& features, int bins) {
  const Shape s = features.shape();
  if (s.h < 2 || s.w < 2) throw ShapeError("feature map " + s.str() + " is smaller than 2x2");
  Plane mean_amp(s.h, s.w);
  Plane plane(s.h, s.w);
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c; ++c) {
      const T* p = features.plane(n, c);
      for (int64_t i = 0; i < s.plane(); ++i) plane.v[static_cast<size_t>(i)] = p[i];
      const Plane amp = amplitude_spectrum(plane);
      for (size_t i = 0; i < amp.v.size(); ++i) mean_amp.v[i] += amp.v[i];
    }
  for (double& v : mean_amp.v) v /= static_cast<double>(s.n * s.c);
  return relative_log_amplitude(radial_profile(mean_amp, bins).value);
}

template <typename T>
SpectrumReport feature_depth_profile(const MkfaNet<T>& model, const Tensor<T>& images,
                                     std::span<const std::string> taps, int bins) {
  if (taps.empty()) throw std::invalid_argument("feature_depth_profile: no taps");
  Tape<T> tape;
  tape.set_grad_enabled(false);
  const auto result = model.forward(tape, tape.constant(images), taps);
  SpectrumReport report;
  for (int b = 0; b < bins; ++b) report.freq.push_back((b + 0.5) / bins);
  for (const auto& t : taps) {
    report.series.emplace_back(t, feature_relative_log_amplitude(result.taps.at(t)->value, bins));
  }
  report.meta["samples"] = images.shape().n;
  report.meta["bins"] = bins;
  report.meta["arch"] = model.config().name;
  return report;
}

template <typename T>
std::vector<EnergySplit> dc_hc_energy(const Tensor<T>& map) {
  const Shape s = map.shape();
  std::vector<EnergySplit> out;
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c; ++c) {
      const T* p = map.plane(n, c);
      const int64_t m = s.plane();
      double shifted = 0.0;
      for (int64_t i = 1; i < m; ++i) shifted += static_cast<double>(p[i]) - p[0];
      const double mean = p[0] + shifted / static_cast<double>(m);
      EnergySplit e;
      for (int64_t i = 0; i < m; ++i) {
        const double d = p[i] - mean;
        e.hc += d * d;
        e.total += static_cast<double>(p[i]) * p[i];
      }
      e.dc = static_cast<double>(m) * mean * mean;
      out.push_back(e);
    }
  return out;
}

template SpectrumReport feature_depth_profile(const MkfaNet<float>&, const Tensor<float>&,
                                              std::span<const std::string>, int);
template SpectrumReport feature_depth_profile(const MkfaNet<double>&, const Tensor<double>&,
                                              std::span<const std::string>, int);
template std::vector<double> feature_relative_log_amplitude(const Tensor<float>&, int);
template std::vector<double> feature_relative_log_amplitude(const Tensor<double>&, int);
template std::vector<EnergySplit> dc_hc_energy(const Tensor<float>&);
template std::vector<EnergySplit> dc_hc_energy(const Tensor<double>&);

}  // namespace mkfa
