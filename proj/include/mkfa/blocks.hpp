#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "mkfa/autodiff.hpp"
#include "mkfa/ops.hpp"
#include "mkfa/rng.hpp"

namespace mkfa {

/// Spatial mixer inside the MKA block. multi_dw7 is the full design;
/// the others exist for the ablation runs.
enum class SpatialMixer { gating_only, single_dw7, multi_dw7 };

/// Channel mixer inside the MFA block. ffn_mf is the full design.
enum class ChannelMixer { ffn_only, ffn_se, ffn_mf };

/// How MF separates the DC and high-frequency parts.
///  literal_dc: DC = spatial mean, HC = Y - DC, out = DC + gamma * HC.
///  two_param:  DC = z_dc * mean, HC = Y - z_l * mean, out = DC + gamma * HC,
///              with learnable z_dc, z_l initialised to one.
enum class MfVariant { literal_dc, two_param };

/// Channel proportions of the low/mid/high dilation slabs.
struct SplitProportions {
  double low = 0.25;
  double mid = 0.25;
  double high = 0.5;
};

/// floor(C * low), floor(C * mid), remainder to the high slab. Throws if any
/// slab would be empty.
std::array<int64_t, 3> split_sizes(int64_t channels, const SplitProportions& p);

template <typename T>
struct MkaBlockParams {
  int64_t channels = 0;
  SpatialMixer mixer = SpatialMixer::multi_dw7;
  std::array<int64_t, 3> split{};
  Parameter<T>* norm_gamma = nullptr;
  Parameter<T>* norm_beta = nullptr;
  Parameter<T>* gate_weight = nullptr;  // F_phi pointwise conv
  Parameter<T>* gate_bias = nullptr;
  std::vector<Parameter<T>*> dw_weight;  // 7x7 depthwise, dilation 1, 2, 3 per slab
  std::vector<Parameter<T>*> dw_bias;
  Parameter<T>* feature_weight = nullptr;  // G_psi pointwise conv
  Parameter<T>* feature_bias = nullptr;
};

template <typename T>
struct SeBlockParams {
  int64_t channels = 0;
  Parameter<T>* reduce_weight = nullptr;
  Parameter<T>* reduce_bias = nullptr;
  Parameter<T>* expand_weight = nullptr;
  Parameter<T>* expand_bias = nullptr;
};

template <typename T>
struct MfaBlockParams {
  int64_t channels = 0;
  int64_t hidden = 0;
  ChannelMixer mixer = ChannelMixer::ffn_mf;
  MfVariant variant = MfVariant::literal_dc;
  Parameter<T>* norm_gamma = nullptr;
  Parameter<T>* norm_beta = nullptr;
  Parameter<T>* expand_weight = nullptr;
  Parameter<T>* expand_bias = nullptr;
  Parameter<T>* dw_weight = nullptr;  // 3x3 depthwise on the hidden width
  Parameter<T>* dw_bias = nullptr;
  Parameter<T>* gamma = nullptr;  // MF channel scale, zero at init
  Parameter<T>* z_dc = nullptr;   // two_param only
  Parameter<T>* z_l = nullptr;
  std::optional<SeBlockParams<T>> se;
  Parameter<T>* proj_weight = nullptr;
  Parameter<T>* proj_bias = nullptr;
};

template <typename T>
struct StemLayer {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;
  Parameter<T>* norm_gamma = nullptr;
  Parameter<T>* norm_beta = nullptr;
};

/// Stage 1: two 3x3 stride-2 convs (in -> C/2 -> C). Stages 2-4: one.
template <typename T>
struct StemParams {
  int stage = 1;
  int64_t in_channels = 0;
  int64_t out_channels = 0;
  std::vector<StemLayer<T>> layers;
};

template <typename T>
MkaBlockParams<T> make_mka_block(ParamRegistry<T>& reg, const std::string& prefix, int64_t channels,
                                 const SplitProportions& split, SpatialMixer mixer, SeededRng& rng);

template <typename T>
SeBlockParams<T> make_se_block(ParamRegistry<T>& reg, const std::string& prefix, int64_t channels,
                               SeededRng& rng);

template <typename T>
MfaBlockParams<T> make_mfa_block(ParamRegistry<T>& reg, const std::string& prefix, int64_t channels,
                                 int64_t hidden, ChannelMixer mixer, MfVariant variant,
                                 SeededRng& rng);

template <typename T>
StemParams<T> make_stem(ParamRegistry<T>& reg, const std::string& prefix, int stage,
                        int64_t in_channels, int64_t out_channels, SeededRng& rng);

/// Y_C: per-slab dilated 7x7 depthwise convolution, concatenated. Same
/// padding (3d) keeps H x W.
template <typename T>
Var<T> multi_kernel_features(Tape<T>& tape, const Var<T>& x, const MkaBlockParams<T>& p);

/// SiLU(Conv1x1(x)) * SiLU(Conv1x1(y_c)).
template <typename T>
Var<T> gated_aggregate(Tape<T>& tape, const Var<T>& x_normed, const Var<T>& y_c,
                       const MkaBlockParams<T>& p);

/// x + MKA(Norm(x)).
template <typename T>
Var<T> mka_forward(Tape<T>& tape, const Var<T>& x, const MkaBlockParams<T>& p);

/// DC + gamma * (Y - DC) with DC the per-channel spatial mean. Exact at
/// gamma = 0 (returns DC), gamma = 1 (returns Y) and for constant planes.
template <typename T>
Var<T> mf_scale(Tape<T>& tape, const Var<T>& y, const Var<T>& gamma);

template <typename T>
Var<T> mf_scale_two_param(Tape<T>& tape, const Var<T>& y, const Var<T>& gamma, const Var<T>& z_dc,
                          const Var<T>& z_l);

/// Conv1x1(MF(GELU(DW3x3(Conv1x1(Norm(x)))))) + x.
template <typename T>
Var<T> mfa_forward(Tape<T>& tape, const Var<T>& x, const MfaBlockParams<T>& p);

/// x * sigmoid(W2 relu(W1 mean(x))).
template <typename T>
Var<T> se_forward(Tape<T>& tape, const Var<T>& x, const SeBlockParams<T>& p);

template <typename T>
Var<T> stem_forward(Tape<T>& tape, const Var<T>& x, const StemParams<T>& p);

/// Weight init: truncated normal, std sqrt(2 / fan_in).
template <typename T>
Tensor<T> fan_in_init(Shape shape, int64_t fan_in, SeededRng& rng);

const char* to_string(SpatialMixer m);
const char* to_string(ChannelMixer m);
const char* to_string(MfVariant v);
SpatialMixer parse_spatial_mixer(const std::string& s);
ChannelMixer parse_channel_mixer(const std::string& s);
MfVariant parse_mf_variant(const std::string& s);

}  // namespace mkfa
