#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mkfa/image.hpp"
#include "mkfa/rng.hpp"

namespace mkfa {

enum class ArtifactKind { splice, grid, smooth, spectral_peak };

inline constexpr std::array<ArtifactKind, 4> kAllArtifactKinds = {ArtifactKind::splice, ArtifactKind::grid,
                                                                  ArtifactKind::smooth, ArtifactKind::spectral_peak};

const char* to_string(ArtifactKind k);
ArtifactKind parse_artifact_kind(const std::string& s);

struct GeneratorSpec {
  int64_t image_size = 64;
  int blob_min = 3;
  int blob_max = 8;
  double alpha = 1.2;  // noise amplitude falls as f^-alpha
  double noise_std = 18.0;
  double sensor_noise_std = 2.5;  // white per-pixel noise
  double intensity = 1.0;  // artifact strength in (0, 1]
  uint64_t seed = 7;

  void validate() const;
};

void to_json(nlohmann::json& j, const GeneratorSpec& s);
void from_json(const nlohmann::json& j, GeneratorSpec& s);

/// Oval base + Gaussian blobs + 1/f^alpha noise + white sensor noise, clamped to [0, 255].
RgbImage gen_real(const GeneratorSpec& spec, SeededRng& rng);

/// Applies one artifact family to `real`. Intensity scales the artifact
/// continuously, so intensity -> 0 returns the input.
RgbImage gen_fake(const RgbImage& real, ArtifactKind kind, double intensity, const GeneratorSpec& spec,
                  SeededRng& rng);

// Augmentations. All preserve the image size; out-of-range parameters throw.
RgbImage hflip(const RgbImage& img);
RgbImage rotate(const RgbImage& img, double degrees);  // [-15, 15], bilinear, edge replicate
RgbImage gaussian_blur(const RgbImage& img, double sigma);  // [0, 3]
RgbImage brightness_contrast(const RgbImage& img, double brightness, double contrast);  // b in [-1,1], c in [0,3]
RgbImage block_dct_compress(const RgbImage& img, int quality);  // [10, 100]

/// Per-sample augmentation policy; each op fires with its probability and
/// draws its parameter uniformly from the given range.
struct AugmentPolicy {
  double p_hflip = 0.5;
  double p_rotate = 0.0;
  double max_rotate_deg = 10.0;
  double p_blur = 0.0;
  double max_blur_sigma = 1.0;
  double p_brightness_contrast = 0.0;
  double max_brightness = 0.1;
  double max_contrast_delta = 0.2;
  double p_compress = 0.0;
  int min_quality = 60;

  static AugmentPolicy none();
  static AugmentPolicy full();  // flip, rotation, blur, brightness/contrast, compression
};

void to_json(nlohmann::json& j, const AugmentPolicy& p);
void from_json(const nlohmann::json& j, AugmentPolicy& p);

RgbImage augment(const RgbImage& img, const AugmentPolicy& policy, SeededRng& rng);

struct SampleRecord {
  std::string path;  // relative to the manifest directory
  int label = 0;     // 0 real, 1 fake
  std::optional<ArtifactKind> kind;
  std::string split;  // "train" or "test"
  uint64_t seed_index = 0;
};

struct Manifest {
  int version = 1;
  GeneratorSpec spec;
  std::vector<SampleRecord> samples;
  std::filesystem::path root;  // directory holding manifest.json, not serialized

  int64_t count(int label, const std::string& split = "") const;
  std::vector<const SampleRecord*> select(const std::string& split) const;

  nlohmann::json to_json() const;
  static Manifest from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& dir) const;
  /// Loads dir/manifest.json and checks every image exists.
  static Manifest load(const std::filesystem::path& dir);
};

/// Deterministic corpus: sample i uses substream seed_index = i. Fake kinds
/// cycle over the four families; the last `test_fraction` of each class goes
/// to the test split.
Manifest gen_corpus(const GeneratorSpec& spec, int64_t n_real, int64_t n_fake, double test_fraction,
                    const std::filesystem::path& out_dir);

/// Regenerates sample `seed_index` in memory (same bytes as gen_corpus).
RgbImage generate_sample(const GeneratorSpec& spec, int label, std::optional<ArtifactKind> kind,
                         uint64_t seed_index);

}  // namespace mkfa
