#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>

#include "mkfa/blocks.hpp"
#include "mkfa/gradcheck.hpp"

namespace mkfa {
namespace {

using Fwd = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

constexpr double kKinkMargin = 0.05;

double min_abs(const Tensor64& t) {
  double m = std::numeric_limits<double>::infinity();
  for (double v : t.data()) m = std::min(m, std::abs(v));
  return m;
}

// Pre-relu activations of the SE squeeze path for input y.
Tensor64 se_pre_relu(const SeBlockParams<double>& p, const Tensor64& y) {
  Tape<double> t;
  t.set_grad_enabled(false);
  auto m = spatial_mean(t, t.constant(y));
  return conv2d(t, m, p.reduce_weight->var, p.reduce_bias->var, Conv2dOptions{})->value;
}

// Hidden activations of an MFA block, the input to its channel mixer.
Tensor64 mfa_hidden(const MfaBlockParams<double>& p, const Tensor64& x) {
  Tape<double> t;
  t.set_grad_enabled(false);
  auto xn = norm_channels(t, t.constant(x), p.norm_gamma->var, p.norm_beta->var);
  auto e = conv2d(t, xn, p.expand_weight->var, p.expand_bias->var, Conv2dOptions{});
  Conv2dOptions dw;
  dw.padding = {1, 1};
  dw.groups = p.hidden;
  return activation(t, Activation::gelu, conv2d(t, e, p.dw_weight->var, p.dw_bias->var, dw))->value;
}

Tensor64 random(Shape s, SeededRng& rng, double scale = 1.0) {
  Tensor64 t(s);
  for (auto& v : t.data()) v = rng.normal() * scale;
  return t;
}

int64_t pick(SeededRng& rng, int64_t lo, int64_t hi) {
  return lo + static_cast<int64_t>(rng.below(static_cast<uint64_t>(hi - lo + 1)));
}

class Suite {
 public:
  Suite(uint64_t seed, double tol) : rng_(seed), tol_(tol) {}

  // fwd maps the inputs to a tensor; a fixed random weighting reduces it to a scalar.
  void check(const std::string& name, std::vector<Tensor64> inputs, const Fwd& fwd) {
    Tensor64 weights;
    SeededRng wrng = rng_.split(results_.size() + 1000003);
    ScalarFn fn = [&](Tape<double>& tape, std::span<const Var<double>> in) {
      Var<double> y = fwd(tape, in);
      if (weights.empty()) weights = random(y->value.shape(), wrng);
      return weighted_sum(tape, y, weights);
    };
    results_.push_back({name, inputs[0].shape().str(), grad_check(fn, inputs, 1e-3, tol_)});
  }

  // Block-level check: input x plus every registry parameter become leaves.
  // `margin` returns the smallest distance of any internal kink argument from
  // zero; the draw is repeated until it clears kKinkMargin.
  template <class Block, class Margin>
  void check_block(const std::string& name, ParamRegistry<double>& reg, Shape x_shape, Block block,
                   Margin margin) {
    Tensor64 x;
    for (int attempt = 0;; ++attempt) {
      for (auto& p : reg) p->value() = random(p->value().shape(), rng_, 0.5);
      x = random(x_shape, rng_);
      if (margin(x) >= kKinkMargin) break;
      if (attempt == 1000) throw std::runtime_error(name + ": no kink-free draw found");
    }
    std::vector<Tensor64> inputs{x};
    for (auto& p : reg) inputs.push_back(p->value());
    check(name, inputs, [&](Tape<double>& tape, std::span<const Var<double>> in) {
      for (size_t i = 0; i < reg.size(); ++i) reg[i].var = in[i + 1];
      return block(tape, in[0]);
    });
  }

  template <class Block>
  void check_block(const std::string& name, ParamRegistry<double>& reg, Shape x_shape, Block block) {
    check_block(name, reg, x_shape, block, [](const Tensor64&) { return kKinkMargin; });
  }

  SeededRng& rng() { return rng_; }
  std::vector<OpCheckResult> take() { return std::move(results_); }

 private:
  SeededRng rng_;
  double tol_;
  std::vector<OpCheckResult> results_;
};

}  // namespace

std::vector<OpCheckResult> run_gradcheck_suite(uint64_t seed, int shapes_per_op, double tolerance) {
  Suite s(seed, tolerance);
  auto& rng = s.rng();
  for (int k = 0; k < shapes_per_op; ++k) {
    {
      const int64_t groups = pick(rng, 1, 2);
      const int64_t cin = groups * pick(rng, 1, 2), cout = groups * pick(rng, 1, 2);
      const int64_t kernel = 2 * pick(rng, 0, 1) + 1;
      Conv2dOptions o;
      o.stride = {pick(rng, 1, 2), pick(rng, 1, 2)};
      o.dilation = {pick(rng, 1, 2), pick(rng, 1, 2)};
      o.padding = {pick(rng, 0, 2), pick(rng, 0, 2)};
      o.groups = groups;
      const Shape xs{pick(rng, 1, 2), cin, pick(rng, 5, 7), pick(rng, 5, 7)};
      s.check("conv2d", {random(xs, rng), random(Shape{cout, cin / groups, kernel, kernel}, rng),
                         random(Shape{1, cout, 1, 1}, rng)},
              [o](Tape<double>& t, std::span<const Var<double>> in) { return conv2d(t, in[0], in[1], in[2], o); });
    }
    {
      const int64_t c = pick(rng, 2, 4);
      Conv2dOptions o;
      const int64_t d = pick(rng, 1, 3);
      o.dilation = {d, d};
      o.padding = {3 * d, 3 * d};
      o.groups = c;
      const Shape xs{pick(rng, 1, 2), c, pick(rng, 4, 7), pick(rng, 4, 7)};
      s.check("conv2d_depthwise7", {random(xs, rng), random(Shape{c, 1, 7, 7}, rng), random(Shape{1, c, 1, 1}, rng)},
              [o](Tape<double>& t, std::span<const Var<double>> in) { return conv2d(t, in[0], in[1], in[2], o); });
    }
    for (auto kind : {Activation::silu, Activation::gelu, Activation::sigmoid, Activation::relu}) {
      static const char* names[] = {"silu", "gelu", "sigmoid", "relu"};
      const Shape xs{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 2, 4), pick(rng, 2, 4)};
      Tensor64 x = random(xs, rng, 2.0);
      // Keep every point at least 0.1 away from the relu kink.
      for (auto& v : x.data()) v = std::copysign(std::abs(v) + 0.1, v);
      s.check(names[static_cast<int>(kind)], {x},
              [kind](Tape<double>& t, std::span<const Var<double>> in) { return activation(t, kind, in[0]); });
    }
    {
      const Shape xs{pick(rng, 1, 2), pick(rng, 3, 5), pick(rng, 2, 4), pick(rng, 2, 4)};
      s.check("norm_channels", {random(xs, rng), random(Shape{1, xs.c, 1, 1}, rng), random(Shape{1, xs.c, 1, 1}, rng)},
              [](Tape<double>& t, std::span<const Var<double>> in) { return norm_channels(t, in[0], in[1], in[2]); });
    }
    {
      const int64_t a = pick(rng, 1, 3), b = pick(rng, 1, 3);
      const Shape xs{pick(rng, 1, 2), a + b, pick(rng, 2, 4), pick(rng, 2, 4)};
      s.check("split_concat", {random(xs, rng)}, [a, b](Tape<double>& t, std::span<const Var<double>> in) {
        const std::array<int64_t, 2> sizes{a, b};
        auto parts = split_channels(t, in[0], sizes);
        auto sq = elementwise(t, Binary::mul, parts[1], parts[1]);
        const std::array<Var<double>, 2> swapped{sq, parts[0]};
        return concat_channels<double>(t, swapped);
      });
    }
    {
      const Shape xs{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 2, 5), pick(rng, 2, 5)};
      s.check("spatial_mean", {random(xs, rng)},
              [](Tape<double>& t, std::span<const Var<double>> in) { return spatial_mean(t, in[0]); });
    }
    for (auto kind : {Binary::add, Binary::sub, Binary::mul}) {
      static const char* names[] = {"add", "sub", "mul"};
      for (bool broadcast : {false, true}) {
        const Shape xs{pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 2, 4), pick(rng, 2, 4)};
        const Shape bs = !broadcast ? xs : rng.below(2) ? Shape{xs.n, xs.c, 1, 1} : Shape{1, xs.c, 1, 1};
        s.check(std::string(names[static_cast<int>(kind)]) + (broadcast ? "_broadcast" : ""),
                {random(xs, rng), random(bs, rng)},
                [kind](Tape<double>& t, std::span<const Var<double>> in) { return elementwise(t, kind, in[0], in[1]); });
      }
    }
    {
      const int64_t f = pick(rng, 2, 6), kk = pick(rng, 2, 4);
      const Shape xs{pick(rng, 1, 3), f, 1, 1};
      s.check("linear", {random(xs, rng), random(Shape{f, kk, 1, 1}, rng), random(Shape{1, kk, 1, 1}, rng)},
              [](Tape<double>& t, std::span<const Var<double>> in) { return linear(t, in[0], in[1], in[2]); });
    }
    {
      const int64_t n = pick(rng, 1, 4), kk = pick(rng, 2, 4);
      std::vector<int> labels;
      for (int64_t i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.below(static_cast<uint64_t>(kk))));
      const double eps = 0.1 * static_cast<double>(rng.below(3));
      s.check("cross_entropy_smoothed", {random(Shape{n, kk, 1, 1}, rng, 2.0)},
              [labels, eps](Tape<double>& t, std::span<const Var<double>> in) {
                return cross_entropy_smoothed(t, in[0], labels, eps);
              });
    }
    {
      const Shape xs{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 2, 4), pick(rng, 2, 4)};
      s.check("sum", {random(xs, rng)}, [](Tape<double>& t, std::span<const Var<double>> in) { return sum(t, in[0]); });
    }
    {
      const Shape ys{pick(rng, 1, 2), pick(rng, 1, 4), pick(rng, 2, 5), pick(rng, 2, 5)};
      s.check("mf_scale", {random(ys, rng), random(Shape{1, ys.c, 1, 1}, rng)},
              [](Tape<double>& t, std::span<const Var<double>> in) { return mf_scale(t, in[0], in[1]); });
      s.check("mf_scale_two_param",
              {random(ys, rng), random(Shape{1, ys.c, 1, 1}, rng), random(Shape{1, ys.c, 1, 1}, rng),
               random(Shape{1, ys.c, 1, 1}, rng)},
              [](Tape<double>& t, std::span<const Var<double>> in) {
                return mf_scale_two_param(t, in[0], in[1], in[2], in[3]);
              });
    }
    {
      ParamRegistry<double> reg;
      const int64_t c = 4 * pick(rng, 1, 2);
      auto p = make_se_block(reg, "se", c, rng);
      s.check_block("se_forward", reg, Shape{pick(rng, 1, 2), c, pick(rng, 2, 4), pick(rng, 2, 4)},
                    [&p](Tape<double>& t, const Var<double>& x) { return se_forward(t, x, p); },
                    [&p](const Tensor64& x) { return min_abs(se_pre_relu(p, x)); });
    }
    {
      ParamRegistry<double> reg;
      const int stage = static_cast<int>(pick(rng, 1, 2));
      const int64_t cin = pick(rng, 1, 3), cout = stage == 1 ? 2 * pick(rng, 3, 4) : pick(rng, 3, 5);
      auto p = make_stem(reg, "stem", stage, cin, cout, rng);
      const int64_t m = stage == 1 ? 4 : 2;
      s.check_block("stem_forward", reg, Shape{pick(rng, 1, 2), cin, m * pick(rng, 1, 2), m * pick(rng, 1, 3)},
                    [&p](Tape<double>& t, const Var<double>& x) { return stem_forward(t, x, p); });
    }
    for (auto mixer : {SpatialMixer::multi_dw7, SpatialMixer::single_dw7, SpatialMixer::gating_only}) {
      ParamRegistry<double> reg;
      const int64_t c = pick(rng, 3, 6);
      SplitProportions third{1.0 / 3, 1.0 / 3, 1.0 / 3};
      auto p = make_mka_block(reg, "mka", c, third, mixer, rng);
      s.check_block(std::string("mka_forward.") + to_string(mixer), reg,
                    Shape{pick(rng, 1, 2), c, pick(rng, 3, 5), pick(rng, 3, 5)},
                    [&p](Tape<double>& t, const Var<double>& x) { return mka_forward(t, x, p); });
    }
    for (auto [mixer, variant] : {std::pair{ChannelMixer::ffn_mf, MfVariant::literal_dc},
                                  std::pair{ChannelMixer::ffn_mf, MfVariant::two_param},
                                  std::pair{ChannelMixer::ffn_se, MfVariant::literal_dc},
                                  std::pair{ChannelMixer::ffn_only, MfVariant::literal_dc}}) {
      ParamRegistry<double> reg;
      const int64_t c = pick(rng, 3, 5), h = 4 * pick(rng, 1, 2);
      auto p = make_mfa_block(reg, "mfa", c, h, mixer, variant, rng);
      std::string name = std::string("mfa_forward.") + to_string(mixer);
      if (mixer == ChannelMixer::ffn_mf) name += std::string(".") + to_string(variant);
      s.check_block(name, reg, Shape{pick(rng, 1, 2), c, pick(rng, 2, 4), pick(rng, 2, 4)},
                    [&p](Tape<double>& t, const Var<double>& x) { return mfa_forward(t, x, p); },
                    [&p](const Tensor64& x) {
                      return p.se ? min_abs(se_pre_relu(*p.se, mfa_hidden(p, x))) : kKinkMargin;
                    });
    }
  }
  return s.take();
}

}  // namespace mkfa
