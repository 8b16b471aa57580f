#include <cmath>

#include "doctest.h"
#include "mkfa/blocks.hpp"
#include "test_util.hpp"

using namespace mkfa;
using mkfa::testing::check_with_params;
using mkfa::testing::max_abs_diff;
using mkfa::testing::random_tensor;

namespace {

double silu(double x) { return x / (1.0 + std::exp(-x)); }

void randomize(ParamRegistry<double>& reg, SeededRng& rng, double scale = 0.5) {
  for (auto& p : reg) p->value() = random_tensor<double>(p->value().shape(), rng, scale);
}

void zero_all(ParamRegistry<double>& reg) {
  for (auto& p : reg) p->value().fill(0.0);
}

Tensor64 eval(const std::function<Var<double>(Tape<double>&, const Var<double>&)>& f, const Tensor64& x) {
  Tape<double> tape;
  tape.set_grad_enabled(false);
  return f(tape, tape.constant(x))->value;
}

Tensor64 identity_pointwise(int64_t c) {
  Tensor64 w(Shape{c, c, 1, 1});
  for (int64_t i = 0; i < c; ++i) w(i, i, 0, 0) = 1.0;
  return w;
}

// Scalar re-implementation of the layer norm over channels.
Tensor64 norm_oracle(const Tensor64& x, const Tensor64& g, const Tensor64& b) {
  const Shape s = x.shape();
  Tensor64 y(s);
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t i = 0; i < s.h; ++i)
      for (int64_t j = 0; j < s.w; ++j) {
        double m = 0, v = 0;
        for (int64_t c = 0; c < s.c; ++c) m += x(n, c, i, j);
        m /= static_cast<double>(s.c);
        for (int64_t c = 0; c < s.c; ++c) v += (x(n, c, i, j) - m) * (x(n, c, i, j) - m);
        v /= static_cast<double>(s.c);
        for (int64_t c = 0; c < s.c; ++c) y(n, c, i, j) = (x(n, c, i, j) - m) / std::sqrt(v + 1e-6) * g[c] + b[c];
      }
  return y;
}

}  // namespace

TEST_CASE("split sizes follow floor with the remainder in the high slab") {
  CHECK(split_sizes(32, {}) == std::array<int64_t, 3>{8, 8, 16});
  CHECK(split_sizes(10, {}) == std::array<int64_t, 3>{2, 2, 6});
  CHECK(split_sizes(6, {1.0 / 3, 1.0 / 3, 1.0 / 3}) == std::array<int64_t, 3>{2, 2, 2});
  CHECK_THROWS_AS(split_sizes(3, {}), ShapeError);
  CHECK_THROWS_AS(split_sizes(2, {1.0 / 3, 1.0 / 3, 1.0 / 3}), ShapeError);
  CHECK_THROWS_AS(split_sizes(8, {0.5, 0.5, 0.5}), std::invalid_argument);
}

TEST_CASE("multi-kernel features with delta kernels are the identity") {
  SeededRng rng(11);
  ParamRegistry<double> reg;
  auto p = make_mka_block(reg, "b", 8, SplitProportions{}, SpatialMixer::multi_dw7, rng);
  for (auto* w : p.dw_weight) {
    w->value().fill(0.0);
    for (int64_t c = 0; c < w->value().shape().n; ++c) w->value()(c, 0, 3, 3) = 1.0;
  }
  Tensor64 x = random_tensor<double>(Shape{2, 8, 9, 11}, rng);
  Tensor64 y = eval([&](auto& t, auto& v) { return multi_kernel_features(t, v, p); }, x);
  REQUIRE(y.shape() == x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("multi-kernel features preserve shape") {
  SeededRng rng(12);
  for (int64_t c : {3, 4, 7, 16}) {
    ParamRegistry<double> reg;
    SplitProportions third{1.0 / 3, 1.0 / 3, 1.0 / 3};
    auto p = make_mka_block(reg, "b", c, third, SpatialMixer::multi_dw7, rng);
    Tensor64 x = random_tensor<double>(Shape{1, c, 5, 6}, rng);
    CHECK(eval([&](auto& t, auto& v) { return multi_kernel_features(t, v, p); }, x).shape() == x.shape());
  }
}

TEST_CASE("multi-kernel features match a slab-wise oracle") {
  SeededRng rng(13);
  ParamRegistry<double> reg;
  auto p = make_mka_block(reg, "b", 6, SplitProportions{1.0 / 3, 1.0 / 3, 1.0 / 3},
                          SpatialMixer::multi_dw7, rng);
  randomize(reg, rng);
  Tensor64 x = random_tensor<double>(Shape{2, 6, 13, 12}, rng);
  Tensor64 y = eval([&](auto& t, auto& v) { return multi_kernel_features(t, v, p); }, x);
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t c = 0; c < 6; ++c) {
      const int64_t slab = c / 2, d = slab + 1;
      const Tensor64& w = p.dw_weight[static_cast<size_t>(slab)]->value();
      const double b = p.dw_bias[static_cast<size_t>(slab)]->value()[c % 2];
      for (int64_t i = 0; i < 13; ++i)
        for (int64_t j = 0; j < 12; ++j) {
          double acc = b;
          for (int64_t u = -3; u <= 3; ++u)
            for (int64_t q = -3; q <= 3; ++q) {
              const int64_t si = i + u * d, sj = j + q * d;
              if (si < 0 || si >= 13 || sj < 0 || sj >= 12) continue;
              acc += w(c % 2, 0, u + 3, q + 3) * x(n, c, si, sj);
            }
          CHECK(std::abs(y(n, c, i, j) - acc) < 1e-12);
        }
    }
}

TEST_CASE("dilated depthwise impulse response lies on the dilation grid") {
  SeededRng rng(14);
  ParamRegistry<double> reg;
  auto p = make_mka_block(reg, "b", 4, SplitProportions{}, SpatialMixer::multi_dw7, rng);
  for (auto* w : p.dw_weight) w->value().fill(1.0);
  Tensor64 x(Shape{1, 4, 31, 31});
  for (int64_t c = 0; c < 4; ++c) x(0, c, 15, 15) = 1.0;
  Tensor64 y = eval([&](auto& t, auto& v) { return multi_kernel_features(t, v, p); }, x);
  const int64_t dil[4] = {1, 2, 3, 3};
  for (int64_t c = 0; c < 4; ++c) {
    const int64_t d = dil[c];
    int64_t nonzero = 0;
    for (int64_t i = 0; i < 31; ++i)
      for (int64_t j = 0; j < 31; ++j) {
        const int64_t di = i - 15, dj = j - 15;
        const bool on_grid = di % d == 0 && dj % d == 0 && std::abs(di) <= 3 * d && std::abs(dj) <= 3 * d;
        if (y(0, c, i, j) != 0.0) {
          ++nonzero;
          CHECK(on_grid);
        }
      }
    CHECK(nonzero == 49);
  }
}

TEST_CASE("gated aggregation") {
  SeededRng rng(15);
  ParamRegistry<double> reg;
  auto p = make_mka_block(reg, "b", 4, SplitProportions{}, SpatialMixer::multi_dw7, rng);

  Tensor64 zeros(Shape{1, 4, 3, 3});
  Tensor64 other = random_tensor<double>(zeros.shape(), rng);
  Tensor64 z = eval([&](auto& t, auto& v) { return gated_aggregate(t, v, t.constant(other), p); }, zeros);
  for (double v : z.data()) CHECK(v == 0.0);

  p.gate_weight->value() = identity_pointwise(4);
  p.feature_weight->value() = identity_pointwise(4);
  Tensor64 ones(Shape{1, 4, 3, 3}, 1.0);
  Tensor64 o = eval([&](auto& t, auto& v) { return gated_aggregate(t, v, t.constant(ones), p); }, ones);
  for (double v : o.data()) CHECK(std::abs(v - 0.534448) < 2e-6);
  CHECK(std::abs(o[0] - silu(1.0) * silu(1.0)) < 1e-15);

  randomize(reg, rng);
  Tensor64 x = random_tensor<double>(Shape{2, 4, 5, 5}, rng);
  Tensor64 yc = random_tensor<double>(x.shape(), rng);
  Tensor64 got = eval([&](auto& t, auto& v) { return gated_aggregate(t, v, t.constant(yc), p); }, x);
  const Tensor64& wg = p.gate_weight->value();
  const Tensor64& wf = p.feature_weight->value();
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t c = 0; c < 4; ++c)
      for (int64_t i = 0; i < 5; ++i)
        for (int64_t j = 0; j < 5; ++j) {
          double a = p.gate_bias->value()[c], b = p.feature_bias->value()[c];
          for (int64_t k = 0; k < 4; ++k) {
            a += wg(c, k, 0, 0) * x(n, k, i, j);
            b += wf(c, k, 0, 0) * yc(n, k, i, j);
          }
          CHECK(std::abs(got(n, c, i, j) - silu(a) * silu(b)) < 1e-12);
        }

  CHECK_THROWS_AS(eval([&](auto& t, auto& v) {
    return gated_aggregate(t, v, t.constant(Tensor64(Shape{2, 4, 5, 4})), p);
  }, x), ShapeError);
}

TEST_CASE("mka block") {
  SeededRng rng(16);
  for (auto mixer : {SpatialMixer::gating_only, SpatialMixer::single_dw7, SpatialMixer::multi_dw7}) {
    ParamRegistry<double> reg;
    auto p = make_mka_block(reg, "b", 8, SplitProportions{}, mixer, rng);
    Tensor64 x = random_tensor<double>(Shape{2, 8, 6, 5}, rng);
    Tensor64 y = eval([&](auto& t, auto& v) { return mka_forward(t, v, p); }, x);
    CHECK(y.shape() == x.shape());

    zero_all(reg);
    Tensor64 id = eval([&](auto& t, auto& v) { return mka_forward(t, v, p); }, x);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(id[i] == x[i]);

    randomize(reg, rng);
    auto report = check_with_params(reg, random_tensor<double>(Shape{2, 8, 4, 5}, rng),
                                    [&](auto& t, auto& v) { return mka_forward(t, v, p); }, rng);
    INFO(to_string(mixer), " worst ", report.worst, " err ", report.max_rel_error);
    CHECK(report.max_rel_error < 1e-5);
  }
  ParamRegistry<double> reg;
  auto p = make_mka_block(reg, "b", 8, SplitProportions{}, SpatialMixer::multi_dw7, rng);
  CHECK_THROWS_AS(eval([&](auto& t, auto& v) { return mka_forward(t, v, p); }, Tensor64(Shape{1, 4, 3, 3})),
                  ShapeError);
}

TEST_CASE("mf_scale on the 2x2 example") {
  Tape<double> tape;
  auto y = tape.constant(Tensor64(Shape{1, 1, 2, 2}, std::vector<double>{1, 3, 5, 7}));
  auto half = mf_scale(tape, y, tape.constant(Tensor64(Shape{1, 1, 1, 1}, 0.5)));
  CHECK(half->value.data()[0] == 2.5);
  CHECK(half->value.data()[1] == 3.5);
  CHECK(half->value.data()[2] == 4.5);
  CHECK(half->value.data()[3] == 5.5);
  auto zero = mf_scale(tape, y, tape.constant(Tensor64(Shape{1, 1, 1, 1}, 0.0)));
  for (double v : zero->value.data()) CHECK(v == 4.0);
  CHECK_THROWS_AS(mf_scale(tape, y, tape.constant(Tensor64(Shape{1, 2, 1, 1}))), ShapeError);
}

TEST_CASE("mf_scale exactness at gamma one and for constant planes") {
  SeededRng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor32 y = random_tensor<float>(Shape{2, 5, 7, 6}, rng, std::pow(10.0, trial % 7 - 3));
    Tensor32 g = random_tensor<float>(Shape{1, 5, 1, 1}, rng, 3.0);
    Tape<float> tape;
    auto one = mf_scale(tape, tape.constant(y), tape.constant(Tensor32(Shape{1, 5, 1, 1}, 1.0f)));
    for (int64_t i = 0; i < y.numel(); ++i) REQUIRE(one->value[i] == y[i]);

    Tensor32 flat(y.shape());
    for (int64_t n = 0; n < 2; ++n)
      for (int64_t c = 0; c < 5; ++c) {
        const float v = static_cast<float>(rng.normal() * 100.0);
        std::fill(flat.plane(n, c), flat.plane(n, c) + 42, v);
      }
    auto same = mf_scale(tape, tape.constant(flat), tape.constant(g));
    for (int64_t i = 0; i < y.numel(); ++i) REQUIRE(same->value[i] == flat[i]);
  }
}

TEST_CASE("mf_scale dc plus hc reconstructs y") {
  // DC and HC computed exactly as the layer does, recombined at gamma one.
  SeededRng rng(18);
  Tensor64 y = random_tensor<double>(Shape{1, 3, 8, 8}, rng, 5.0);
  Tape<double> tape;
  auto dc = mf_scale(tape, tape.constant(y), tape.constant(Tensor64(Shape{1, 3, 1, 1}, 0.0)));
  auto rec = mf_scale(tape, tape.constant(y), tape.constant(Tensor64(Shape{1, 3, 1, 1}, 1.0)));
  for (int64_t i = 0; i < y.numel(); ++i) {
    const double hc = y[i] - dc->value[i];
    CHECK(std::abs((dc->value[i] + hc) - y[i]) <= (std::abs(hc) + std::abs(y[i])) * 0x1.0p-53);
    CHECK(rec->value[i] == y[i]);
  }
}

TEST_CASE("mf_scale gradient") {
  SeededRng rng(19);
  std::vector<Tensor64> pts{random_tensor<double>(Shape{2, 3, 4, 5}, rng),
                            random_tensor<double>(Shape{1, 3, 1, 1}, rng)};
  Tensor64 w = random_tensor<double>(pts[0].shape(), rng);
  auto report = grad_check(
      [&](Tape<double>& t, std::span<const Var<double>> in) {
        return weighted_sum(t, mf_scale(t, in[0], in[1]), w);
      },
      pts);
  CHECK(report.max_rel_error < 1e-7);
}

TEST_CASE("two-parameter variant reduces to the literal form at unit z") {
  SeededRng rng(20);
  Tensor64 y = random_tensor<double>(Shape{2, 4, 5, 5}, rng);
  Tensor64 g = random_tensor<double>(Shape{1, 4, 1, 1}, rng);
  Tensor64 ones(Shape{1, 4, 1, 1}, 1.0);
  Tape<double> tape;
  auto a = mf_scale(tape, tape.constant(y), tape.constant(g));
  auto b = mf_scale_two_param(tape, tape.constant(y), tape.constant(g), tape.constant(ones), tape.constant(ones));
  CHECK(max_abs_diff(a->value, b->value) < 1e-12);
}

TEST_CASE("mfa block") {
  SeededRng rng(21);
  struct Case {
    ChannelMixer mixer;
    MfVariant variant;
  };
  for (auto c : {Case{ChannelMixer::ffn_mf, MfVariant::literal_dc}, Case{ChannelMixer::ffn_mf, MfVariant::two_param},
                 Case{ChannelMixer::ffn_se, MfVariant::literal_dc}, Case{ChannelMixer::ffn_only, MfVariant::literal_dc}}) {
    ParamRegistry<double> reg;
    auto p = make_mfa_block(reg, "b", 4, 8, c.mixer, c.variant, rng);
    Tensor64 x = random_tensor<double>(Shape{2, 4, 5, 6}, rng);
    CHECK(eval([&](auto& t, auto& v) { return mfa_forward(t, v, p); }, x).shape() == x.shape());

    zero_all(reg);
    Tensor64 id = eval([&](auto& t, auto& v) { return mfa_forward(t, v, p); }, x);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(id[i] == x[i]);

    randomize(reg, rng);
    auto report = check_with_params(reg, random_tensor<double>(Shape{2, 4, 4, 3}, rng),
                                    [&](auto& t, auto& v) { return mfa_forward(t, v, p); }, rng);
    INFO(to_string(c.mixer), " ", to_string(c.variant), " worst ", report.worst, " err ", report.max_rel_error);
    CHECK(report.max_rel_error < 1e-5);
  }
}

TEST_CASE("fresh mfa block passes a spatially constant map to the projection") {
  SeededRng rng(22);
  ParamRegistry<double> reg;
  auto p = make_mfa_block(reg, "b", 4, 16, ChannelMixer::ffn_mf, MfVariant::literal_dc, rng);
  for (double g : p.gamma->value().data()) CHECK(g == 0.0);
  // With an identity projection and zero bias, output - x is the MF output.
  ParamRegistry<double> reg4;
  auto q = make_mfa_block(reg4, "b", 4, 4, ChannelMixer::ffn_mf, MfVariant::literal_dc, rng);
  q.proj_weight->value() = identity_pointwise(4);
  Tensor64 x = random_tensor<double>(Shape{1, 4, 6, 6}, rng);
  Tensor64 y = eval([&](auto& t, auto& v) { return mfa_forward(t, v, q); }, x);
  for (int64_t c = 0; c < 4; ++c) {
    const double ref = y(0, c, 0, 0) - x(0, c, 0, 0);
    for (int64_t i = 0; i < 6; ++i)
      for (int64_t j = 0; j < 6; ++j) CHECK(std::abs(y(0, c, i, j) - x(0, c, i, j) - ref) < 1e-12);
  }
}

TEST_CASE("se block") {
  SeededRng rng(23);
  ParamRegistry<double> reg;
  auto p = make_se_block(reg, "se", 8, rng);
  Tensor64 x = random_tensor<double>(Shape{2, 8, 4, 4}, rng);

  zero_all(reg);
  p.expand_bias->value().fill(60.0);
  Tensor64 id = eval([&](auto& t, auto& v) { return se_forward(t, v, p); }, x);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(id[i] == x[i]);

  randomize(reg, rng, 2.0);
  Tensor64 y = eval([&](auto& t, auto& v) { return se_forward(t, v, p); }, x);
  for (int64_t n = 0; n < 2; ++n) {
    double mean[8], hid[2];
    for (int64_t c = 0; c < 8; ++c) {
      mean[c] = 0;
      for (int64_t i = 0; i < 16; ++i) mean[c] += x.plane(n, c)[i];
      mean[c] /= 16;
    }
    for (int64_t k = 0; k < 2; ++k) {
      double a = p.reduce_bias->value()[k];
      for (int64_t c = 0; c < 8; ++c) a += p.reduce_weight->value()(k, c, 0, 0) * mean[c];
      hid[k] = std::max(a, 0.0);
    }
    for (int64_t c = 0; c < 8; ++c) {
      double a = p.expand_bias->value()[c];
      for (int64_t k = 0; k < 2; ++k) a += p.expand_weight->value()(c, k, 0, 0) * hid[k];
      const double gate = 1.0 / (1.0 + std::exp(-a));
      CHECK(gate > 0.0);
      CHECK(gate < 1.0);
      for (int64_t i = 0; i < 16; ++i) CHECK(std::abs(y.plane(n, c)[i] - x.plane(n, c)[i] * gate) < 1e-12);
    }
  }
  CHECK_THROWS_AS(make_se_block(reg, "se2", 6, rng), ShapeError);
  CHECK_THROWS_AS(eval([&](auto& t, auto& v) { return se_forward(t, v, p); }, Tensor64(Shape{1, 4, 2, 2})),
                  ShapeError);
}

TEST_CASE("stems") {
  SeededRng rng(24);
  ParamRegistry<float> reg;
  auto s1 = make_stem(reg, "stem.1", 1, 3, 32, rng);
  auto s2 = make_stem(reg, "stem.2", 2, 32, 64, rng);
  Tape<float> tape;
  tape.set_grad_enabled(false);
  auto x = tape.constant(random_tensor<float>(Shape{1, 3, 64, 64}, rng));
  auto h1 = stem_forward(tape, x, s1);
  CHECK(h1->value.shape() == Shape{1, 32, 16, 16});
  auto h2 = stem_forward(tape, h1, s2);
  CHECK(h2->value.shape() == Shape{1, 64, 8, 8});

  CHECK_THROWS_AS(stem_forward(tape, tape.constant(Tensor32(Shape{1, 3, 62, 64})), s1), ShapeError);
  CHECK_THROWS_AS(stem_forward(tape, tape.constant(Tensor32(Shape{1, 32, 1, 2})), s2), ShapeError);
  CHECK_THROWS_AS(stem_forward(tape, tape.constant(Tensor32(Shape{1, 32, 7, 8})), s2), ShapeError);

  for (auto& p : reg) p->value().fill(0.0f);
  auto z = stem_forward(tape, x, s1);
  for (float v : z->value.data()) CHECK(v == 0.0f);
}

TEST_CASE("stem matches a composed oracle and passes a gradient check") {
  SeededRng rng(25);
  ParamRegistry<double> reg;
  auto s = make_stem(reg, "stem.2", 2, 3, 4, rng);
  randomize(reg, rng);
  Tensor64 x = random_tensor<double>(Shape{2, 3, 6, 4}, rng);
  Tensor64 y = eval([&](auto& t, auto& v) { return stem_forward(t, v, s); }, x);
  Tensor64 conv(Shape{2, 4, 3, 2});
  const auto& w = s.layers[0].weight->value();
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t o = 0; o < 4; ++o)
      for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 2; ++j) {
          double acc = s.layers[0].bias->value()[o];
          for (int64_t c = 0; c < 3; ++c)
            for (int64_t u = 0; u < 3; ++u)
              for (int64_t q = 0; q < 3; ++q) {
                const int64_t si = 2 * i - 1 + u, sj = 2 * j - 1 + q;
                if (si >= 0 && si < 6 && sj >= 0 && sj < 4) acc += w(o, c, u, q) * x(n, c, si, sj);
              }
          conv(n, o, i, j) = acc;
        }
  CHECK(max_abs_diff(y, norm_oracle(conv, s.layers[0].norm_gamma->value(), s.layers[0].norm_beta->value())) < 1e-10);

  auto report = check_with_params(reg, x, [&](auto& t, auto& v) { return stem_forward(t, v, s); }, rng);
  INFO(report.worst);
  CHECK(report.max_rel_error < 1e-5);
}

TEST_CASE("initialisation is deterministic and fan-in scaled") {
  SeededRng a(99), b(99);
  ParamRegistry<float> ra, rb;
  auto pa = make_mfa_block(ra, "m", 64, 256, ChannelMixer::ffn_mf, MfVariant::literal_dc, a);
  make_mfa_block(rb, "m", 64, 256, ChannelMixer::ffn_mf, MfVariant::literal_dc, b);
  for (size_t i = 0; i < ra.size(); ++i) {
    CHECK(ra[i].name == rb[i].name);
    for (int64_t j = 0; j < ra[i].value().numel(); ++j) REQUIRE(ra[i].value()[j] == rb[i].value()[j]);
  }
  const auto& w = pa.expand_weight->value();
  double ss = 0, mx = 0;
  for (float v : w.data()) {
    ss += double(v) * v;
    mx = std::max(mx, std::abs(double(v)));
  }
  const double sd = std::sqrt(2.0 / 64);
  const double empirical = std::sqrt(ss / static_cast<double>(w.numel()));
  // A normal truncated at two sigma keeps about 77% of the variance.
  CHECK(empirical == doctest::Approx(sd * std::sqrt(0.774)).epsilon(0.05));
  CHECK(mx <= 2 * sd + 1e-6);
  CHECK(pa.norm_gamma->value()[0] == 1.0f);
  CHECK(pa.norm_beta->value()[0] == 0.0f);
}
