#include "mkfa/blocks.hpp"

#include <cmath>
#include <stdexcept>

namespace mkfa {
namespace {

template <typename T>
Var<T> v(const Parameter<T>* p) {
  return p ? p->var : Var<T>{};
}

template <typename T>
Parameter<T>* add_conv(ParamRegistry<T>& reg, const std::string& name, Shape shape, int64_t fan_in,
                       SeededRng& rng) {
  SeededRng stream = rng.split(reg.size());
  return &reg.add(name, fan_in_init<T>(shape, fan_in, stream));
}

template <typename T>
Parameter<T>* add_constant(ParamRegistry<T>& reg, const std::string& name, int64_t channels, T value) {
  return &reg.add(name, Tensor<T>(Shape{1, channels, 1, 1}, value));
}

template <typename T>
Var<T> pointwise(Tape<T>& tape, const Var<T>& x, const Parameter<T>* w, const Parameter<T>* b) {
  return conv2d(tape, x, w->var, v(b), Conv2dOptions{});
}

template <typename T>
Var<T> depthwise(Tape<T>& tape, const Var<T>& x, const Parameter<T>* w, const Parameter<T>* b,
                 int64_t kernel, int64_t dilation) {
  Conv2dOptions o;
  const int64_t pad = dilation * (kernel - 1) / 2;
  o.padding = {pad, pad};
  o.dilation = {dilation, dilation};
  o.groups = x->value.shape().c;
  return conv2d(tape, x, w->var, v(b), o);
}

template <typename T>
void require_channels(const char* op, const Var<T>& x, int64_t expected) {
  if (x->value.shape().c != expected) {
    throw ShapeError(std::string(op) + ": expected " + std::to_string(expected) +
                     " channels, got " + std::to_string(x->value.shape().c));
  }
}

}  // namespace

std::array<int64_t, 3> split_sizes(int64_t channels, const SplitProportions& p) {
  if (p.low < 0 || p.mid < 0 || p.high < 0 || std::abs(p.low + p.mid + p.high - 1.0) > 1e-9) {
    throw std::invalid_argument("split proportions must be non-negative and sum to 1");
  }
  const auto low = static_cast<int64_t>(std::floor(static_cast<double>(channels) * p.low));
  const auto mid = static_cast<int64_t>(std::floor(static_cast<double>(channels) * p.mid));
  const int64_t high = channels - low - mid;
  if (low <= 0 || mid <= 0 || high <= 0) {
    throw ShapeError("C=" + std::to_string(channels) +
                     " is too small to split into three non-empty dilation slabs (" +
                     std::to_string(low) + "," + std::to_string(mid) + "," + std::to_string(high) + ")");
  }
  return {low, mid, high};
}

template <typename T>
Tensor<T> fan_in_init(Shape shape, int64_t fan_in, SeededRng& rng) {
  Tensor<T> t(shape);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& x : t.data()) x = static_cast<T>(rng.truncated_normal(stddev));
  return t;
}

template <typename T>
MkaBlockParams<T> make_mka_block(ParamRegistry<T>& reg, const std::string& prefix, int64_t channels,
                                 const SplitProportions& split, SpatialMixer mixer, SeededRng& rng) {
  MkaBlockParams<T> p;
  p.channels = channels;
  p.mixer = mixer;
  if (mixer == SpatialMixer::multi_dw7) {
    p.split = split_sizes(channels, split);
  } else {
    p.split = {channels, 0, 0};
  }
  p.norm_gamma = add_constant<T>(reg, prefix + ".norm.gamma", channels, T(1));
  p.norm_beta = add_constant<T>(reg, prefix + ".norm.beta", channels, T(0));
  p.gate_weight = add_conv(reg, prefix + ".gate.weight", Shape{channels, channels, 1, 1}, channels, rng);
  p.gate_bias = add_constant<T>(reg, prefix + ".gate.bias", channels, T(0));
  const int slabs = mixer == SpatialMixer::multi_dw7 ? 3 : mixer == SpatialMixer::single_dw7 ? 1 : 0;
  for (int s = 0; s < slabs; ++s) {
    const int64_t c = p.split[static_cast<size_t>(s)];
    const std::string name = prefix + ".dw" + std::to_string(s + 1);
    p.dw_weight.push_back(add_conv(reg, name + ".weight", Shape{c, 1, 7, 7}, 49, rng));
    p.dw_bias.push_back(add_constant<T>(reg, name + ".bias", c, T(0)));
  }
  p.feature_weight =
      add_conv(reg, prefix + ".feature.weight", Shape{channels, channels, 1, 1}, channels, rng);
  p.feature_bias = add_constant<T>(reg, prefix + ".feature.bias", channels, T(0));
  return p;
}

template <typename T>
SeBlockParams<T> make_se_block(ParamRegistry<T>& reg, const std::string& prefix, int64_t channels,
                               SeededRng& rng) {
  if (channels % 4 != 0) {
    throw ShapeError("SE block needs channels divisible by 4, got " + std::to_string(channels));
  }
  const int64_t squeezed = channels / 4;
  SeBlockParams<T> p;
  p.channels = channels;
  p.reduce_weight = add_conv(reg, prefix + ".reduce.weight", Shape{squeezed, channels, 1, 1}, channels, rng);
  p.reduce_bias = add_constant<T>(reg, prefix + ".reduce.bias", squeezed, T(0));
  p.expand_weight = add_conv(reg, prefix + ".expand.weight", Shape{channels, squeezed, 1, 1}, squeezed, rng);
  p.expand_bias = add_constant<T>(reg, prefix + ".expand.bias", channels, T(0));
  return p;
}

template <typename T>
MfaBlockParams<T> make_mfa_block(ParamRegistry<T>& reg, const std::string& prefix, int64_t channels,
                                 int64_t hidden, ChannelMixer mixer, MfVariant variant,
                                 SeededRng& rng) {
  MfaBlockParams<T> p;
  p.channels = channels;
  p.hidden = hidden;
  p.mixer = mixer;
  p.variant = variant;
  p.norm_gamma = add_constant<T>(reg, prefix + ".norm.gamma", channels, T(1));
  p.norm_beta = add_constant<T>(reg, prefix + ".norm.beta", channels, T(0));
  p.expand_weight = add_conv(reg, prefix + ".expand.weight", Shape{hidden, channels, 1, 1}, channels, rng);
  p.expand_bias = add_constant<T>(reg, prefix + ".expand.bias", hidden, T(0));
  p.dw_weight = add_conv(reg, prefix + ".dw.weight", Shape{hidden, 1, 3, 3}, 9, rng);
  p.dw_bias = add_constant<T>(reg, prefix + ".dw.bias", hidden, T(0));
  if (mixer == ChannelMixer::ffn_mf) {
    p.gamma = add_constant<T>(reg, prefix + ".mf.gamma", hidden, T(0));
    if (variant == MfVariant::two_param) {
      p.z_dc = add_constant<T>(reg, prefix + ".mf.z_dc", hidden, T(1));
      p.z_l = add_constant<T>(reg, prefix + ".mf.z_l", hidden, T(1));
    }
  } else if (mixer == ChannelMixer::ffn_se) {
    p.se = make_se_block(reg, prefix + ".se", hidden, rng);
  }
  p.proj_weight = add_conv(reg, prefix + ".proj.weight", Shape{channels, hidden, 1, 1}, hidden, rng);
  p.proj_bias = add_constant<T>(reg, prefix + ".proj.bias", channels, T(0));
  return p;
}

template <typename T>
StemParams<T> make_stem(ParamRegistry<T>& reg, const std::string& prefix, int stage,
                        int64_t in_channels, int64_t out_channels, SeededRng& rng) {
  if (stage < 1 || stage > 4) throw std::invalid_argument("stem stage must be 1..4");
  StemParams<T> p;
  p.stage = stage;
  p.in_channels = in_channels;
  p.out_channels = out_channels;
  std::vector<std::pair<int64_t, int64_t>> convs;
  if (stage == 1) {
    if (out_channels % 2 != 0) throw ShapeError("stage-1 stem needs an even channel count");
    convs = {{in_channels, out_channels / 2}, {out_channels / 2, out_channels}};
  } else {
    convs = {{in_channels, out_channels}};
  }
  for (size_t i = 0; i < convs.size(); ++i) {
    const auto [cin, cout] = convs[i];
    const std::string name = prefix + ".conv" + std::to_string(i + 1);
    const std::string norm = prefix + ".norm" + std::to_string(i + 1);
    StemLayer<T> layer;
    layer.weight = add_conv(reg, name + ".weight", Shape{cout, cin, 3, 3}, cin * 9, rng);
    layer.bias = add_constant<T>(reg, name + ".bias", cout, T(0));
    layer.norm_gamma = add_constant<T>(reg, norm + ".gamma", cout, T(1));
    layer.norm_beta = add_constant<T>(reg, norm + ".beta", cout, T(0));
    p.layers.push_back(layer);
  }
  return p;
}

template <typename T>
Var<T> multi_kernel_features(Tape<T>& tape, const Var<T>& x, const MkaBlockParams<T>& p) {
  require_channels("multi_kernel_features", x, p.channels);
  switch (p.mixer) {
    case SpatialMixer::gating_only:
      return x;
    case SpatialMixer::single_dw7:
      return depthwise(tape, x, p.dw_weight[0], p.dw_bias[0], 7, 1);
    case SpatialMixer::multi_dw7:
      break;
  }
  auto slabs = split_channels(tape, x, std::span<const int64_t>(p.split));
  std::vector<Var<T>> outs;
  for (size_t s = 0; s < 3; ++s) {
    outs.push_back(depthwise(tape, slabs[s], p.dw_weight[s], p.dw_bias[s], 7, static_cast<int64_t>(s + 1)));
  }
  return concat_channels<T>(tape, outs);
}

template <typename T>
Var<T> gated_aggregate(Tape<T>& tape, const Var<T>& x_normed, const Var<T>& y_c,
                       const MkaBlockParams<T>& p) {
  if (!(x_normed->value.shape() == y_c->value.shape())) {
    throw ShapeError("gated_aggregate: " + x_normed->value.shape().str() + " vs " +
                     y_c->value.shape().str());
  }
  auto gate = activation(tape, Activation::silu, pointwise(tape, x_normed, p.gate_weight, p.gate_bias));
  auto feat = activation(tape, Activation::silu, pointwise(tape, y_c, p.feature_weight, p.feature_bias));
  return elementwise(tape, Binary::mul, gate, feat);
}

template <typename T>
Var<T> mka_forward(Tape<T>& tape, const Var<T>& x, const MkaBlockParams<T>& p) {
  require_channels("mka_forward", x, p.channels);
  auto xn = norm_channels(tape, x, p.norm_gamma->var, p.norm_beta->var);
  auto yc = multi_kernel_features(tape, xn, p);
  return elementwise(tape, Binary::add, x, gated_aggregate(tape, xn, yc, p));
}

template <typename T>
Var<T> mf_scale(Tape<T>& tape, const Var<T>& y, const Var<T>& gamma) {
  const Shape s = y->value.shape();
  const Shape sg = gamma->value.shape();
  if (!(sg.n == 1 && sg.c == s.c && sg.h == 1 && sg.w == 1)) {
    throw ShapeError("mf_scale: gamma " + sg.str() + " does not match " + std::to_string(s.c) +
                     " channels");
  }
  const int64_t plane = s.plane();
  Tensor<T> out(s);
  Tensor<T> dc(Shape{s.n, s.c, 1, 1});
  for (int64_t n = 0; n < s.n; ++n) {
    for (int64_t c = 0; c < s.c; ++c) {
      const T* yp = y->value.plane(n, c);
      double acc = 0.0;
      for (int64_t i = 1; i < plane; ++i) acc += static_cast<double>(yp[i]) - yp[0];
      const T mean = static_cast<T>(yp[0] + acc / static_cast<double>(plane));
      dc(n, c, 0, 0) = mean;
      const double g = gamma->value[c];
      T* op = out.plane(n, c);
      for (int64_t i = 0; i < plane; ++i) {
        op[i] = static_cast<T>(std::lerp(static_cast<double>(mean), static_cast<double>(yp[i]), g));
      }
    }
  }
  const bool rg = tape.needs_grad(y, gamma);
  Var<T> result = tape.emit(std::move(out), rg, "mf_scale");
  if (!rg) return result;
  tape.record([y, gamma, result, dc = std::move(dc), plane] {
    if (!result->has_grad()) return;
    const Shape s = y->value.shape();
    std::vector<double> dgamma(static_cast<size_t>(s.c), 0.0);
    for (int64_t n = 0; n < s.n; ++n) {
      for (int64_t c = 0; c < s.c; ++c) {
        const T* g = result->grad.plane(n, c);
        const T* yp = y->value.plane(n, c);
        const double mean = dc(n, c, 0, 0);
        const double gam = gamma->value[c];
        double gsum = 0.0, ghc = 0.0;
        for (int64_t i = 0; i < plane; ++i) {
          gsum += g[i];
          ghc += static_cast<double>(g[i]) * (yp[i] - mean);
        }
        dgamma[static_cast<size_t>(c)] += ghc;
        if (y->requires_grad) {
          T* dy = y->grad_buffer().plane(n, c);
          const double shared = (1.0 - gam) * gsum / static_cast<double>(plane);
          for (int64_t i = 0; i < plane; ++i) dy[i] += static_cast<T>(gam * g[i] + shared);
        }
      }
    }
    if (gamma->requires_grad) {
      T* dg = gamma->grad_buffer().ptr();
      for (int64_t c = 0; c < s.c; ++c) dg[c] += static_cast<T>(dgamma[static_cast<size_t>(c)]);
    }
  });
  return result;
}

template <typename T>
Var<T> mf_scale_two_param(Tape<T>& tape, const Var<T>& y, const Var<T>& gamma, const Var<T>& z_dc,
                          const Var<T>& z_l) {
  auto mean = spatial_mean(tape, y);
  auto dc = elementwise(tape, Binary::mul, mean, z_dc);
  auto hc = elementwise(tape, Binary::sub, y, elementwise(tape, Binary::mul, mean, z_l));
  return elementwise(tape, Binary::add, elementwise(tape, Binary::mul, hc, gamma), dc);
}

template <typename T>
Var<T> se_forward(Tape<T>& tape, const Var<T>& x, const SeBlockParams<T>& p) {
  require_channels("se_forward", x, p.channels);
  auto squeezed = spatial_mean(tape, x);
  auto hidden = activation(tape, Activation::relu, pointwise(tape, squeezed, p.reduce_weight, p.reduce_bias));
  auto gate = activation(tape, Activation::sigmoid, pointwise(tape, hidden, p.expand_weight, p.expand_bias));
  return elementwise(tape, Binary::mul, x, gate);
}

template <typename T>
Var<T> mfa_forward(Tape<T>& tape, const Var<T>& x, const MfaBlockParams<T>& p) {
  require_channels("mfa_forward", x, p.channels);
  auto xn = norm_channels(tape, x, p.norm_gamma->var, p.norm_beta->var);
  auto expanded = pointwise(tape, xn, p.expand_weight, p.expand_bias);
  auto y = activation(tape, Activation::gelu, depthwise(tape, expanded, p.dw_weight, p.dw_bias, 3, 1));
  Var<T> mixed = y;
  if (p.mixer == ChannelMixer::ffn_mf) {
    mixed = p.variant == MfVariant::literal_dc
                ? mf_scale(tape, y, p.gamma->var)
                : mf_scale_two_param(tape, y, p.gamma->var, p.z_dc->var, p.z_l->var);
  } else if (p.mixer == ChannelMixer::ffn_se) {
    mixed = se_forward(tape, y, *p.se);
  }
  return elementwise(tape, Binary::add, pointwise(tape, mixed, p.proj_weight, p.proj_bias), x);
}

template <typename T>
Var<T> stem_forward(Tape<T>& tape, const Var<T>& x, const StemParams<T>& p) {
  const Shape s = x->value.shape();
  require_channels("stem_forward", x, p.in_channels);
  const int64_t min_extent = p.stage == 1 ? 4 : 2;
  if (s.h < min_extent || s.w < min_extent || s.h % 2 != 0 || s.w % 2 != 0 ||
      (p.stage == 1 && (s.h % 4 != 0 || s.w % 4 != 0))) {
    throw ShapeError("stem " + std::to_string(p.stage) + ": spatial extents " + std::to_string(s.h) +
                     "x" + std::to_string(s.w) + " must be even and at least " +
                     std::to_string(min_extent));
  }
  Var<T> h = x;
  Conv2dOptions o;
  o.stride = {2, 2};
  o.padding = {1, 1};
  for (const auto& layer : p.layers) {
    h = conv2d(tape, h, layer.weight->var, v(layer.bias), o);
    h = norm_channels(tape, h, layer.norm_gamma->var, layer.norm_beta->var);
  }
  return h;
}

const char* to_string(SpatialMixer m) {
  switch (m) {
    case SpatialMixer::gating_only:
      return "gating_only";
    case SpatialMixer::single_dw7:
      return "single_dw7";
    case SpatialMixer::multi_dw7:
      return "multi_dw7";
  }
  return "?";
}

const char* to_string(ChannelMixer m) {
  switch (m) {
    case ChannelMixer::ffn_only:
      return "ffn_only";
    case ChannelMixer::ffn_se:
      return "ffn_se";
    case ChannelMixer::ffn_mf:
      return "ffn_mf";
  }
  return "?";
}

const char* to_string(MfVariant v) {
  return v == MfVariant::literal_dc ? "literal_dc" : "two_param";
}

SpatialMixer parse_spatial_mixer(const std::string& s) {
  for (auto m : {SpatialMixer::gating_only, SpatialMixer::single_dw7, SpatialMixer::multi_dw7}) {
    if (s == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown spatial mixer: " + s);
}

ChannelMixer parse_channel_mixer(const std::string& s) {
  for (auto m : {ChannelMixer::ffn_only, ChannelMixer::ffn_se, ChannelMixer::ffn_mf}) {
    if (s == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown channel mixer: " + s);
}

MfVariant parse_mf_variant(const std::string& s) {
  if (s == "literal_dc") return MfVariant::literal_dc;
  if (s == "two_param") return MfVariant::two_param;
  throw std::invalid_argument("unknown mf_variant: " + s);
}

#define MKFA_INSTANTIATE_BLOCKS(T)                                                                   \
  template Tensor<T> fan_in_init<T>(Shape, int64_t, SeededRng&);                                    \
  template MkaBlockParams<T> make_mka_block(ParamRegistry<T>&, const std::string&, int64_t,         \
                                            const SplitProportions&, SpatialMixer, SeededRng&);    \
  template SeBlockParams<T> make_se_block(ParamRegistry<T>&, const std::string&, int64_t,           \
                                          SeededRng&);                                               \
  template MfaBlockParams<T> make_mfa_block(ParamRegistry<T>&, const std::string&, int64_t,         \
                                            int64_t, ChannelMixer, MfVariant, SeededRng&);          \
  template StemParams<T> make_stem(ParamRegistry<T>&, const std::string&, int, int64_t, int64_t,    \
                                   SeededRng&);                                                      \
  template Var<T> multi_kernel_features(Tape<T>&, const Var<T>&, const MkaBlockParams<T>&);         \
  template Var<T> gated_aggregate(Tape<T>&, const Var<T>&, const Var<T>&, const MkaBlockParams<T>&); \
  template Var<T> mka_forward(Tape<T>&, const Var<T>&, const MkaBlockParams<T>&);                   \
  template Var<T> mf_scale(Tape<T>&, const Var<T>&, const Var<T>&);                                 \
  template Var<T> mf_scale_two_param(Tape<T>&, const Var<T>&, const Var<T>&, const Var<T>&,         \
                                     const Var<T>&);                                                 \
  template Var<T> mfa_forward(Tape<T>&, const Var<T>&, const MfaBlockParams<T>&);                   \
  template Var<T> se_forward(Tape<T>&, const Var<T>&, const SeBlockParams<T>&);                     \
  template Var<T> stem_forward(Tape<T>&, const Var<T>&, const StemParams<T>&);

MKFA_INSTANTIATE_BLOCKS(float)
MKFA_INSTANTIATE_BLOCKS(double)

#undef MKFA_INSTANTIATE_BLOCKS

}  // namespace mkfa
