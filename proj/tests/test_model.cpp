#include <set>

#include "doctest.h"
#include "mkfa/model.hpp"
#include "test_util.hpp"

using namespace mkfa;
using mkfa::testing::random_tensor;

namespace {

template <typename T>
ForwardResult<T> run(const MkfaNet<T>& net, Tape<T>& tape, const Tensor<T>& x,
                     std::vector<std::string> taps = {}) {
  return net.forward(tape, tape.constant(x), taps);
}

// Independent count: tally by walking each block's definition by hand.
int64_t hand_count(const ArchConfig& c) {
  int64_t total = 0, prev = c.in_channels;
  for (size_t i = 0; i < 4; ++i) {
    const int64_t C = c.dims[i], h = c.hidden(static_cast<int>(i));
    if (i == 0) {
      total += prev * (C / 2) * 9 + (C / 2) + 2 * (C / 2);
      total += (C / 2) * C * 9 + C + 2 * C;
    } else {
      total += prev * C * 9 + C + 2 * C;
    }
    int64_t mka = 2 * C + C * C + C + C * C + C;
    if (c.spatial_mixer != SpatialMixer::gating_only) mka += C * 49 + C;
    int64_t mfa = 2 * C + C * h + h + h * 9 + h + h * C + C;
    if (c.channel_mixer == ChannelMixer::ffn_mf) mfa += c.mf_variant == MfVariant::two_param ? 3 * h : h;
    if (c.channel_mixer == ChannelMixer::ffn_se) mfa += h * (h / 4) + h / 4 + (h / 4) * h + h;
    total += c.depths[i] * (mka + mfa);
    prev = C;
  }
  return total + 2 * prev + prev * c.num_classes + c.num_classes;
}

}  // namespace

TEST_CASE("presets") {
  CHECK(preset("tiny").dims == std::array<int64_t, 4>{32, 64, 128, 256});
  CHECK(preset("tiny").depths == std::array<int64_t, 4>{3, 3, 12, 2});
  CHECK(preset("small").dims == std::array<int64_t, 4>{64, 128, 320, 512});
  CHECK(preset("small").depths == std::array<int64_t, 4>{2, 3, 10, 2});
  CHECK(preset("micro").dims == std::array<int64_t, 4>{16, 32, 64, 128});
  CHECK(preset("micro").provenance == "non-paper");
  CHECK(preset("tiny").provenance == "paper");
  CHECK_THROWS_AS(preset("huge"), std::invalid_argument);
}

TEST_CASE("config json round trip and validation") {
  ArchConfig c = preset("micro");
  c.mf_variant = MfVariant::two_param;
  c.split_proportions = {0.5, 0.25, 0.25};
  nlohmann::json j = c;
  ArchConfig back = j.get<ArchConfig>();
  CHECK(back.dims == c.dims);
  CHECK(back.mlp_ratios == c.mlp_ratios);
  CHECK(back.mf_variant == MfVariant::two_param);
  CHECK(back.split_proportions.low == 0.5);
  CHECK(nlohmann::json(back) == j);
  for (const char* key : {"dims", "depths", "mlp_ratios", "split_proportions", "num_classes", "mf_variant"}) {
    CHECK(j.contains(key));
  }

  ArchConfig bad = preset("micro");
  bad.depths[2] = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = preset("micro");
  bad.mlp_ratios[0] = 0.5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = preset("micro");
  bad.split_proportions = {0.5, 0.5, 0.5};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = preset("micro");
  bad.dims[1] = 0;
  CHECK_THROWS_AS(MkfaNet<float>(bad, 1), std::invalid_argument);
}

TEST_CASE("parameter counts") {
  for (const auto& name : preset_names()) {
    const ArchConfig c = preset(name);
    const auto count = count_params(c);
    CHECK(count.total == hand_count(c));
    int64_t sum = 0;
    for (const auto& [k, v] : count.breakdown) sum += v;
    CHECK(sum == count.total);
    MkfaNet<float> net(c, 0);
    CHECK(net.params().total_elements() == count.total);
  }
  const double tiny = static_cast<double>(count_params(preset("tiny")).total);
  const double small = static_cast<double>(count_params(preset("small")).total);
  CHECK(std::abs(tiny - 5.2e6) <= 0.3 * 5.2e6);
  CHECK(std::abs(small - 19.8e6) <= 0.3 * 19.8e6);
  CHECK(count_params(preset("tiny")).total == 4207010);
  CHECK(count_params(preset("small")).total == 18978370);
  CHECK(count_params(preset("micro")).total == 680354);
}

TEST_CASE("closed-form count matches the registry on random configs") {
  SeededRng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    ArchConfig c;
    for (size_t i = 0; i < 4; ++i) {
      c.dims[i] = 4 * (1 + static_cast<int64_t>(rng.below(6)));
      c.depths[i] = 1 + static_cast<int64_t>(rng.below(2));
      c.mlp_ratios[i] = 1.0 + static_cast<double>(rng.below(4));
    }
    c.num_classes = 2 + static_cast<int64_t>(rng.below(3));
    c.mf_variant = rng.below(2) ? MfVariant::two_param : MfVariant::literal_dc;
    c.spatial_mixer = static_cast<SpatialMixer>(rng.below(3));
    c.channel_mixer = static_cast<ChannelMixer>(rng.below(3));
    MkfaNet<float> net(c, trial);
    CHECK(net.params().total_elements() == count_params(c).total);
    CHECK(count_params(c).total == hand_count(c));
    std::set<std::string> names;
    for (const auto& p : net.params()) names.insert(p->name);
    CHECK(names.size() == net.params().size());
  }
}

TEST_CASE("build is deterministic per seed") {
  MkfaNet<float> a(preset("micro"), 42), b(preset("micro"), 42), c(preset("micro"), 43);
  bool any_diff = false;
  for (size_t i = 0; i < a.params().size(); ++i) {
    const auto& pa = a.params()[i].value();
    const auto& pb = b.params()[i].value();
    const auto& pc = c.params()[i].value();
    for (int64_t j = 0; j < pa.numel(); ++j) {
      REQUIRE(pa[j] == pb[j]);
      any_diff |= pa[j] != pc[j];
    }
  }
  CHECK(any_diff);
  CHECK(a.params().find("stage3.block4.mfa.mf.gamma") != nullptr);
  CHECK(a.params().find("stem.1.conv2.weight") != nullptr);
  CHECK(a.params().find("head.fc.bias") != nullptr);
}

TEST_CASE("forward shapes and resolution ladder") {
  SeededRng rng(6);
  MkfaNet<float> micro(preset("micro"), 1);
  Tape<float> tape;
  tape.set_grad_enabled(false);
  auto r = run(micro, tape, random_tensor<float>(Shape{2, 3, 64, 64}, rng), {"stage1", "stage2", "stage3", "stage4"});
  CHECK(r.logits->value.shape() == Shape{2, 2, 1, 1});
  CHECK(r.taps.at("stage1")->value.shape() == Shape{2, 16, 16, 16});
  CHECK(r.taps.at("stage2")->value.shape() == Shape{2, 32, 8, 8});
  CHECK(r.taps.at("stage3")->value.shape() == Shape{2, 64, 4, 4});
  CHECK(r.taps.at("stage4")->value.shape() == Shape{2, 128, 2, 2});

  CHECK_THROWS_AS(run(micro, tape, Tensor32(Shape{1, 3, 48, 64})), ShapeError);
  CHECK_THROWS_AS(run(micro, tape, Tensor32(Shape{1, 1, 64, 64})), ShapeError);
  CHECK_THROWS_AS(run(micro, tape, Tensor32(Shape{1, 3, 64, 64}), {"stage9"}), std::invalid_argument);

  MkfaNet<float> tiny(preset("tiny"), 1);
  auto t = run(tiny, tape, random_tensor<float>(Shape{1, 3, 256, 256}, rng), {"stage1", "stage2", "stage3", "stage4"});
  CHECK(t.logits->value.shape() == Shape{1, 2, 1, 1});
  CHECK(t.taps.at("stage1")->value.shape() == Shape{1, 32, 64, 64});
  CHECK(t.taps.at("stage2")->value.shape() == Shape{1, 64, 32, 32});
  CHECK(t.taps.at("stage3")->value.shape() == Shape{1, 128, 16, 16});
  CHECK(t.taps.at("stage4")->value.shape() == Shape{1, 256, 8, 8});
}

TEST_CASE("tapping does not perturb logits and batching is consistent") {
  SeededRng rng(7);
  MkfaNet<float> net(preset("micro"), 3);
  Tensor32 x = random_tensor<float>(Shape{3, 3, 64, 64}, rng);
  Tape<float> tape;
  tape.set_grad_enabled(false);
  auto plain = run(net, tape, x);
  auto tapped = run(net, tape, x, net.tap_names());
  CHECK(tapped.taps.size() == net.tap_names().size());
  for (int64_t i = 0; i < plain.logits->value.numel(); ++i) CHECK(plain.logits->value[i] == tapped.logits->value[i]);

  for (int64_t n = 0; n < 3; ++n) {
    Tensor32 one(Shape{1, 3, 64, 64});
    std::copy(x.plane(n, 0), x.plane(n, 0) + 3 * 64 * 64, one.ptr());
    auto single = run(net, tape, one);
    for (int64_t k = 0; k < 2; ++k) CHECK(std::abs(single.logits->value[k] - plain.logits->value(n, k, 0, 0)) < 1e-5);
  }
}

TEST_CASE("all-zero model outputs the head bias") {
  SeededRng rng(8);
  MkfaNet<float> net(preset("micro"), 3);
  for (auto& p : net.params()) p->value().fill(0.0f);
  net.params().at("head.fc.bias").value() = Tensor32(Shape{1, 2, 1, 1}, std::vector<float>{0.25f, -1.5f});
  Tape<float> tape;
  auto r = run(net, tape, random_tensor<float>(Shape{4, 3, 64, 64}, rng));
  for (int64_t n = 0; n < 4; ++n) {
    CHECK(r.logits->value(n, 0, 0, 0) == 0.25f);
    CHECK(r.logits->value(n, 1, 0, 0) == -1.5f);
  }
}

TEST_CASE("load_from copies across precisions") {
  SeededRng rng(9);
  MkfaNet<float> a(preset("micro"), 11);
  MkfaNet<double> b(preset("micro"), 12);
  b.load_from(a);
  Tensor32 x = random_tensor<float>(Shape{1, 3, 64, 64}, rng);
  Tape<float> ta;
  Tape<double> tb;
  auto la = a.forward(ta, ta.constant(x)).logits->value;
  auto lb = b.forward(tb, tb.constant(x.cast<double>())).logits->value;
  for (int64_t k = 0; k < 2; ++k) CHECK(std::abs(la[k] - lb[k]) < 1e-3);
  MkfaNet<float> other(preset("tiny"), 1);
  CHECK_THROWS_AS(other.load_from(a), std::invalid_argument);
}
