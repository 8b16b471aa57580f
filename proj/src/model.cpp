#include "mkfa/model.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

namespace mkfa {
namespace {

std::string stage_name(int i) { return "stage" + std::to_string(i + 1); }

std::string block_name(int i, int j) { return stage_name(i) + ".block" + std::to_string(j + 1); }

int64_t mka_count(int64_t c, SpatialMixer mixer) {
  const int64_t dw = mixer == SpatialMixer::gating_only ? 0 : 50 * c;
  return 2 * c + 2 * (c * c + c) + dw;
}

int64_t mfa_count(int64_t c, int64_t h, ChannelMixer mixer, MfVariant variant) {
  int64_t n = 2 * c + (c * h + h) + 10 * h + (h * c + c);
  if (mixer == ChannelMixer::ffn_mf) {
    n += variant == MfVariant::two_param ? 3 * h : h;
  } else if (mixer == ChannelMixer::ffn_se) {
    const int64_t q = h / 4;
    n += (h * q + q) + (q * h + h);
  }
  return n;
}

int64_t stem_count(int stage, int64_t cin, int64_t cout) {
  auto layer = [](int64_t a, int64_t b) { return a * 9 * b + b + 2 * b; };
  if (stage == 0) return layer(cin, cout / 2) + layer(cout / 2, cout);
  return layer(cin, cout);
}

}  // namespace

void ArchConfig::validate() const {
  for (int i = 0; i < 4; ++i) {
    const std::string at = " at stage " + std::to_string(i + 1);
    if (dims[static_cast<size_t>(i)] <= 0) throw std::invalid_argument("dims must be positive" + at);
    if (depths[static_cast<size_t>(i)] < 1) throw std::invalid_argument("depths must be >= 1" + at);
    if (!(mlp_ratios[static_cast<size_t>(i)] >= 1.0)) throw std::invalid_argument("mlp_ratios must be >= 1" + at);
    if (spatial_mixer == SpatialMixer::multi_dw7) {
      try {
        split_sizes(dims[static_cast<size_t>(i)], split_proportions);
      } catch (const std::exception& e) {
        throw std::invalid_argument(std::string("split_proportions: ") + e.what() + at);
      }
    }
    if (channel_mixer == ChannelMixer::ffn_se && hidden(i) % 4 != 0) {
      throw std::invalid_argument("SE needs hidden width divisible by 4" + at);
    }
  }
  const auto& p = split_proportions;
  if (p.low < 0 || p.mid < 0 || p.high < 0 || std::abs(p.low + p.mid + p.high - 1.0) > 1e-9) {
    throw std::invalid_argument("split_proportions must be non-negative and sum to 1");
  }
  if (dims[0] % 2 != 0) throw std::invalid_argument("dims[0] must be even (stage-1 stem uses C/2)");
  if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  if (in_channels < 1) throw std::invalid_argument("in_channels must be >= 1");
}

int64_t ArchConfig::hidden(int stage) const {
  const auto s = static_cast<size_t>(stage);
  return static_cast<int64_t>(std::llround(mlp_ratios[s] * static_cast<double>(dims[s])));
}

ArchConfig preset(const std::string& name) {
  ArchConfig c;
  c.name = name;
  if (name == "tiny") {
    c.provenance = "paper";
    c.dims = {32, 64, 128, 256};
    c.depths = {3, 3, 12, 2};
    c.mlp_ratios = {8, 8, 4, 4};
  } else if (name == "small") {
    c.provenance = "paper";
    c.dims = {64, 128, 320, 512};
    c.depths = {2, 3, 10, 2};
    c.mlp_ratios = {8, 8, 4, 4};
  } else if (name == "micro") {
    c.provenance = "non-paper";
    c.dims = {16, 32, 64, 128};
    c.depths = {2, 2, 4, 2};
    c.mlp_ratios = {4, 4, 4, 4};
  } else {
    throw std::invalid_argument("unknown preset '" + name + "' (expected tiny, small or micro)");
  }
  return c;
}

std::vector<std::string> preset_names() { return {"tiny", "small", "micro"}; }

void to_json(nlohmann::json& j, const ArchConfig& c) {
  j = nlohmann::json{
      {"name", c.name},
      {"provenance", c.provenance},
      {"dims", c.dims},
      {"depths", c.depths},
      {"mlp_ratios", c.mlp_ratios},
      {"split_proportions", {c.split_proportions.low, c.split_proportions.mid, c.split_proportions.high}},
      {"num_classes", c.num_classes},
      {"in_channels", c.in_channels},
      {"mf_variant", to_string(c.mf_variant)},
      {"spatial_mixer", to_string(c.spatial_mixer)},
      {"channel_mixer", to_string(c.channel_mixer)},
  };
}

void from_json(const nlohmann::json& j, ArchConfig& c) {
  ArchConfig d;
  if (j.contains("preset")) d = preset(j.at("preset").get<std::string>());
  c = d;
  c.name = j.value("name", d.name);
  c.provenance = j.value("provenance", d.provenance);
  if (j.contains("dims")) c.dims = j.at("dims").get<std::array<int64_t, 4>>();
  if (j.contains("depths")) c.depths = j.at("depths").get<std::array<int64_t, 4>>();
  if (j.contains("mlp_ratios")) c.mlp_ratios = j.at("mlp_ratios").get<std::array<double, 4>>();
  if (j.contains("split_proportions")) {
    const auto p = j.at("split_proportions").get<std::array<double, 3>>();
    c.split_proportions = {p[0], p[1], p[2]};
  }
  c.num_classes = j.value("num_classes", d.num_classes);
  c.in_channels = j.value("in_channels", d.in_channels);
  if (j.contains("mf_variant")) c.mf_variant = parse_mf_variant(j.at("mf_variant").get<std::string>());
  if (j.contains("spatial_mixer")) c.spatial_mixer = parse_spatial_mixer(j.at("spatial_mixer").get<std::string>());
  if (j.contains("channel_mixer")) c.channel_mixer = parse_channel_mixer(j.at("channel_mixer").get<std::string>());
}

ParamCount count_params(const ArchConfig& c) {
  c.validate();
  ParamCount out;
  auto add = [&](std::string name, int64_t n) {
    out.breakdown.emplace_back(std::move(name), n);
    out.total += n;
  };
  int64_t prev = c.in_channels;
  for (int i = 0; i < 4; ++i) {
    const int64_t ch = c.dims[static_cast<size_t>(i)];
    const int64_t depth = c.depths[static_cast<size_t>(i)];
    add("stem." + std::to_string(i + 1), stem_count(i, prev, ch));
    add(stage_name(i) + ".mka", depth * mka_count(ch, c.spatial_mixer));
    add(stage_name(i) + ".mfa", depth * mfa_count(ch, c.hidden(i), c.channel_mixer, c.mf_variant));
    prev = ch;
  }
  add("head", 2 * prev + prev * c.num_classes + c.num_classes);
  return out;
}

template <typename T>
MkfaNet<T>::MkfaNet(const ArchConfig& config, uint64_t seed) : config_(config) {
  config_.validate();
  SeededRng rng(seed);
  int64_t prev = config_.in_channels;
  for (int i = 0; i < 4; ++i) {
    const int64_t ch = config_.dims[static_cast<size_t>(i)];
    Stage stage{make_stem(registry_, "stem." + std::to_string(i + 1), i + 1, prev, ch, rng), {}};
    for (int j = 0; j < config_.depths[static_cast<size_t>(i)]; ++j) {
      const std::string b = block_name(i, j);
      auto mka = make_mka_block(registry_, b + ".mka", ch, config_.split_proportions, config_.spatial_mixer, rng);
      auto mfa = make_mfa_block(registry_, b + ".mfa", ch, config_.hidden(i), config_.channel_mixer,
                                config_.mf_variant, rng);
      stage.blocks.emplace_back(std::move(mka), std::move(mfa));
    }
    stages_.push_back(std::move(stage));
    prev = ch;
  }
  head_norm_gamma_ = &registry_.add("head.norm.gamma", Tensor<T>(Shape{1, prev, 1, 1}, T(1)));
  head_norm_beta_ = &registry_.add("head.norm.beta", Tensor<T>(Shape{1, prev, 1, 1}, T(0)));
  SeededRng head_rng = rng.split(registry_.size());
  head_weight_ = &registry_.add("head.fc.weight",
                                fan_in_init<T>(Shape{prev, config_.num_classes, 1, 1}, prev, head_rng));
  head_bias_ = &registry_.add("head.fc.bias", Tensor<T>(Shape{1, config_.num_classes, 1, 1}, T(0)));
}

template <typename T>
std::vector<std::string> MkfaNet<T>::tap_names() const {
  std::vector<std::string> names;
  for (int i = 0; i < 4; ++i) {
    names.push_back("stem" + std::to_string(i + 1));
    for (int j = 0; j < static_cast<int>(stages_[static_cast<size_t>(i)].blocks.size()); ++j) {
      names.push_back(block_name(i, j) + ".mka");
      names.push_back(block_name(i, j));
    }
    names.push_back(stage_name(i));
  }
  return names;
}

template <typename T>
ForwardResult<T> MkfaNet<T>::forward(Tape<T>& tape, const Var<T>& images,
                                     std::span<const std::string> taps) const {
  const Shape s = images->value.shape();
  if (s.c != config_.in_channels) {
    throw ShapeError("expected " + std::to_string(config_.in_channels) + " input channels, got " +
                     std::to_string(s.c));
  }
  if (s.h % 32 != 0 || s.w % 32 != 0 || s.h == 0 || s.w == 0) {
    throw ShapeError("input extents " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                     " must be positive multiples of 32");
  }
  std::set<std::string> wanted(taps.begin(), taps.end());
  if (!wanted.empty()) {
    const auto all = tap_names();
    const std::set<std::string> known(all.begin(), all.end());
    for (const auto& t : wanted) {
      if (!known.count(t)) throw std::invalid_argument("unknown feature tap '" + t + "'");
    }
  }
  ForwardResult<T> out;
  auto keep = [&](const std::string& name, const Var<T>& v) {
    if (wanted.count(name)) out.taps[name] = v;
  };
  Var<T> h = images;
  for (int i = 0; i < 4; ++i) {
    const auto& stage = stages_[static_cast<size_t>(i)];
    h = stem_forward(tape, h, stage.stem);
    keep("stem" + std::to_string(i + 1), h);
    for (int j = 0; j < static_cast<int>(stage.blocks.size()); ++j) {
      const auto& [mka, mfa] = stage.blocks[static_cast<size_t>(j)];
      h = mka_forward(tape, h, mka);
      keep(block_name(i, j) + ".mka", h);
      h = mfa_forward(tape, h, mfa);
      keep(block_name(i, j), h);
    }
    keep(stage_name(i), h);
  }
  h = norm_channels(tape, h, head_norm_gamma_->var, head_norm_beta_->var);
  h = spatial_mean(tape, h);
  out.logits = linear(tape, h, head_weight_->var, head_bias_->var);
  return out;
}

template class MkfaNet<float>;
template class MkfaNet<double>;

}  // namespace mkfa
