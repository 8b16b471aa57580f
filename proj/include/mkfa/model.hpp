#pragma once

#include <array>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mkfa/blocks.hpp"

namespace mkfa {

struct ArchConfig {
  std::string name = "custom";
  std::string provenance = "user";  // "paper" for the published tiny/small presets
  std::array<int64_t, 4> dims{};
  std::array<int64_t, 4> depths{};
  std::array<double, 4> mlp_ratios{};
  SplitProportions split_proportions{};
  int64_t num_classes = 2;
  int64_t in_channels = 3;
  MfVariant mf_variant = MfVariant::literal_dc;
  SpatialMixer spatial_mixer = SpatialMixer::multi_dw7;
  ChannelMixer channel_mixer = ChannelMixer::ffn_mf;

  /// Throws std::invalid_argument describing the first bad field.
  void validate() const;
  /// MFA hidden width round(r_i * C_i), stage in 0..3.
  int64_t hidden(int stage) const;
};

ArchConfig preset(const std::string& name);
std::vector<std::string> preset_names();

void to_json(nlohmann::json& j, const ArchConfig& c);
void from_json(const nlohmann::json& j, ArchConfig& c);

struct ParamCount {
  int64_t total = 0;
  std::vector<std::pair<std::string, int64_t>> breakdown;  // stem.I, stageI.mka, stageI.mfa, head
};

/// Closed-form parameter count; equals the built registry exactly.
ParamCount count_params(const ArchConfig& config);

template <typename T>
struct ForwardResult {
  Var<T> logits;  // N x K x 1 x 1
  std::map<std::string, Var<T>> taps;
};

/// Four-stage hierarchical network: stem then N_i (MKA, MFA) pairs per stage,
/// followed by norm, global mean and a linear classifier.
template <typename T>
class MkfaNet {
 public:
  MkfaNet(const ArchConfig& config, uint64_t seed);

  /// Tap names: "stemI", "stageI.blockJ.mka", "stageI.blockJ", "stageI"
  /// (1-based). Unknown names throw std::invalid_argument.
  ForwardResult<T> forward(Tape<T>& tape, const Var<T>& images,
                           std::span<const std::string> taps = {}) const;

  std::vector<std::string> tap_names() const;

  const ArchConfig& config() const { return config_; }
  ParamRegistry<T>& params() { return registry_; }
  const ParamRegistry<T>& params() const { return registry_; }

  /// Copies every parameter value from a model of the same architecture.
  template <typename U>
  void load_from(const MkfaNet<U>& other) {
    if (other.params().size() != registry_.size()) throw std::invalid_argument("architecture mismatch");
    for (size_t i = 0; i < registry_.size(); ++i) {
      const auto& src = other.params()[i];
      auto& dst = registry_[i];
      if (src.name != dst.name || !(src.value().shape() == dst.value().shape())) {
        throw std::invalid_argument("parameter mismatch at " + dst.name);
      }
      dst.value() = src.value().template cast<T>();
    }
  }

 private:
  struct Stage {
    StemParams<T> stem;
    std::vector<std::pair<MkaBlockParams<T>, MfaBlockParams<T>>> blocks;
  };

  ArchConfig config_;
  ParamRegistry<T> registry_;
  std::vector<Stage> stages_;
  Parameter<T>* head_norm_gamma_ = nullptr;
  Parameter<T>* head_norm_beta_ = nullptr;
  Parameter<T>* head_weight_ = nullptr;
  Parameter<T>* head_bias_ = nullptr;
};

}  // namespace mkfa
