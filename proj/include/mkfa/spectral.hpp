#pragma once

#include <complex>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mkfa/image.hpp"
#include "mkfa/model.hpp"

namespace mkfa {

/// Single-channel H x W map of doubles, row-major.
struct Plane {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<double> v;

  Plane() = default;
  Plane(int64_t h, int64_t w, double fill = 0.0) : height(h), width(w), v(static_cast<size_t>(h * w), fill) {}
  double& at(int64_t y, int64_t x) { return v[static_cast<size_t>(y * width + x)]; }
  double at(int64_t y, int64_t x) const { return v[static_cast<size_t>(y * width + x)]; }
};

using ComplexGrid = std::vector<std::complex<double>>;

/// Direct separable 2-D DFT, O(HW(H+W)).
ComplexGrid dft2d_direct(const Plane& map);
/// Radix-2 FFT along axes whose length is a power of two, direct DFT otherwise.
ComplexGrid dft2d(const Plane& map);
/// Complex forward or inverse (1/HW-normalised) transform of an H x W grid.
ComplexGrid dft2d(ComplexGrid grid, int64_t height, int64_t width, bool inverse);

/// |DFT| with DC moved to (floor(H/2), floor(W/2)).
Plane amplitude_spectrum(const Plane& map);

struct RadialProfile {
  std::vector<double> value;  // mean amplitude per bin
  std::vector<double> freq;   // bin midpoints in [0, 1]
  std::vector<int64_t> count;
  std::vector<bool> empty;  // empty bins carry the previous bin's value
};

/// Equal-width bins over r / r_max, r measured from the centred DC position
/// and r_max the largest radius on the grid.
RadialProfile radial_profile(const Plane& amplitude, int bins = 32);

/// log(A(f) + eps) - log(A(0) + eps).
std::vector<double> relative_log_amplitude(std::span<const double> profile, double eps = 1e-8);

struct SpectrumReport {
  std::vector<double> freq;
  std::vector<std::pair<std::string, std::vector<double>>> series;
  nlohmann::json meta = nlohmann::json::object();

  const std::vector<double>& at(const std::string& name) const;
  bool has(const std::string& name) const;
  /// Mean of a series over bins with freq > threshold.
  double band_mean(const std::string& name, double threshold = 0.5) const;
  std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;
};

struct SpectrumSample {
  const RgbImage* image = nullptr;
  int label = 0;
  std::string kind;  // artifact kind for fakes, empty for reals
};

/// Per-image grayscale -> amplitude spectrum -> radial profile -> relative log
/// amplitude, averaged per group. Series: real_mean, fake_mean, diff and, for
/// each artifact kind, fake_<kind> and diff_<kind>.
SpectrumReport corpus_spectrum_stats(std::span<const SpectrumSample> samples, int bins = 32);

/// One relative-log-amplitude series per tap, in the order given: per-channel
/// amplitude spectra averaged over channels and samples, then binned.
template <typename T>
SpectrumReport feature_depth_profile(const MkfaNet<T>& model, const Tensor<T>& images,
                                     std::span<const std::string> taps, int bins = 32);

/// Relative log amplitude of the channel- and sample-averaged spectrum of a
/// feature tensor.
template <typename T>
std::vector<double> feature_relative_log_amplitude(const Tensor<T>& features, int bins = 32);

struct EnergySplit {
  double dc = 0.0;     // H * W * mean^2
  double hc = 0.0;     // sum (x - mean)^2
  double total = 0.0;  // sum x^2
};

/// One split per (n, c) plane, index n * C + c.
template <typename T>
std::vector<EnergySplit> dc_hc_energy(const Tensor<T>& map);

}  // namespace mkfa
