#include <fstream>
#include <sstream>

#include "doctest.h"
#include "mkfa/gradcam.hpp"
#include "mkfa/ops.hpp"
#include "mkfa/train.hpp"

using namespace mkfa;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::filesystem::path fresh(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("mkfa_test_train_" + name);
  std::filesystem::remove_all(p);
  return p;
}

const Dataset& small_data() {
  static const Dataset d = [] {
    GeneratorSpec spec;
    spec.image_size = 32;
    return Dataset::load(gen_corpus(spec, 40, 40, 0.25, fresh("corpus")));
  }();
  return d;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 16;
  c.lr = 1e-3;
  c.warmup_epochs = 0.5;
  c.augment = AugmentPolicy::full();
  return c;
}

}  // namespace

TEST_CASE("train config json round trip") {
  TrainConfig c = quick_config();
  c.optimizer.kind = OptimizerKind::adamw;
  c.seed = 99;
  const TrainConfig back = nlohmann::json(c).get<TrainConfig>();
  CHECK(nlohmann::json(back) == nlohmann::json(c));
  c.label_smoothing = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("fixed seed training is bit reproducible") {
  const auto a = fresh("a"), b = fresh("b");
  const auto ra = train<float>(quick_config(), small_data(), a);
  train<float>(quick_config(), small_data(), b);
  CHECK(ra.metrics.size() == 3);
  CHECK(ra.steps == 3 * 4);
  CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
  CHECK(slurp(a / "checkpoint.mkfa") == slurp(b / "checkpoint.mkfa"));
  const std::string csv = slurp(a / "metrics.csv");
  CHECK(csv.rfind("epoch,step,loss,train_auc,test_auc,lr\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  // Different seed, different run.
  TrainConfig other = quick_config();
  other.seed = 8;
  const auto c = fresh("c");
  train<float>(other, small_data(), c);
  CHECK(slurp(a / "metrics.csv") != slurp(c / "metrics.csv"));
}

TEST_CASE("resume equals uninterrupted training") {
  const auto full = fresh("full"), part = fresh("part");
  train<float>(quick_config(), small_data(), full);
  TrainConfig stop = quick_config();
  stop.stop_after_epoch = 1;
  const auto first = train<float>(stop, small_data(), part);
  CHECK(first.metrics.size() == 1);
  const auto snapshot = part / "snapshot.mkfa";
  std::filesystem::copy_file(part / "checkpoint.mkfa", snapshot);
  const auto resumed = train<float>(quick_config(), small_data(), part, snapshot);
  CHECK(resumed.metrics.size() == 3);
  CHECK(slurp(full / "metrics.csv") == slurp(part / "metrics.csv"));
  CHECK(slurp(full / "checkpoint.mkfa") == slurp(part / "checkpoint.mkfa"));
  TrainConfig different = quick_config();
  different.lr = 5e-4;
  CHECK_THROWS_AS(train<float>(different, small_data(), fresh("d"), snapshot), std::invalid_argument);
}

TEST_CASE("evaluate the all-zero model") {
  MkfaNet<float> net(preset("micro"), 1);
  for (auto& p : net.params()) p->value().fill(0.0f);
  const auto r = evaluate(net, small_data(), "test");
  CHECK(r.auc == 0.5);
  CHECK(r.samples == 20);
  CHECK(r.n_real == 10);
  CHECK(r.loss == doctest::Approx(std::log(2.0)));
  for (double s : r.scores) CHECK(s == 0.5);
  // Constant scores predict the real class, whose prior is the majority here.
  Dataset skew = small_data();
  for (size_t i = 0; i < skew.labels.size(); ++i) {
    if (skew.splits[i] == "test" && skew.labels[i] == 1 && i % 2 == 0) skew.splits[i] = "train";
  }
  const auto rs = evaluate(net, skew, "test");
  const double prior = static_cast<double>(rs.n_real) / static_cast<double>(rs.samples);
  CHECK(rs.accuracy == doctest::Approx(std::max(prior, 1.0 - prior)));
  CHECK_THROWS_AS(evaluate(net, small_data(), "val"), std::invalid_argument);
}

TEST_CASE("per-kind aucs partition the fake pairs") {
  MkfaNet<float> net(preset("micro"), 2);
  const auto r = evaluate(net, small_data(), "test");
  uint64_t pairs = 0, twice = 0;
  for (const auto& [k, c] : r.kind_counts) {
    pairs += c.pairs;
    twice += c.twice_wins;
  }
  CHECK(r.kind_counts.size() == 4);
  CHECK(pairs == r.counts.pairs);
  CHECK(twice == r.counts.twice_wins);
}

TEST_CASE("ablation harness") {
  TrainConfig c = quick_config();
  c.epochs = 1;
  c.augment = AugmentPolicy::none();
  const auto rows = ablate<float>(c, small_data(), ablation_variants(), fresh("ablate"));
  REQUIRE(rows.size() == 6);
  CHECK(rows[0].params < rows[1].params);
  CHECK(rows[1].params <= rows[2].params);
  CHECK(rows[2].params == rows[3].params);
  CHECK(rows[2].test_auc == rows[3].test_auc);
  for (const auto& r : rows) CHECK((r.test_auc >= 0.0 && r.test_auc <= 1.0));
  const std::string csv = ablation_csv(rows);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
  CHECK(csv.find("ffn_mf,MFA,+MF,multi_dw7,ffn_mf") != std::string::npos);
  CHECK_THROWS_AS(parse_ablation_variant("dw5"), std::invalid_argument);
}

TEST_CASE("ablation variants change the built modules") {
  auto names = [](const AblationVariant& v) {
    ArchConfig a = preset("micro");
    a.spatial_mixer = v.spatial;
    a.channel_mixer = v.channel;
    MkfaNet<float> net(a, 1);
    std::string all;
    for (const auto& p : net.params()) all += p->name + " ";
    return all;
  };
  const std::string gating = names(parse_ablation_variant("gating_only"));
  CHECK(gating.find(".mka.dw") == std::string::npos);
  CHECK(names(parse_ablation_variant("single_dw7")).find(".mka.dw1") != std::string::npos);
  const std::string se = names(parse_ablation_variant("ffn_se"));
  CHECK(se.find(".se.") != std::string::npos);
  CHECK(se.find(".mf.") == std::string::npos);
  const std::string mf = names(parse_ablation_variant("ffn_mf"));
  CHECK(mf.find(".mf.gamma") != std::string::npos);
  CHECK(mf.find(".se.") == std::string::npos);
}

TEST_CASE("grad-cam contracts") {
  MkfaNet<double> net(preset("micro"), 3);
  const RgbImage& img = small_data().images[50];
  SUBCASE("values lie in [0, 1] with a unit maximum") {
    const auto cam = gradcam(net, img, 1, default_cam_tap(net.config()));
    CHECK(cam.heatmap.height == 32);
    double mx = 0.0;
    for (double v : cam.heatmap.v) {
      CHECK((v >= 0.0 && v <= 1.0));
      mx = std::max(mx, v);
    }
    CHECK((mx == 1.0 || mx == 0.0));
    CHECK(default_cam_tap(net.config()) == "stage3.block4");
    for (const auto& p : net.params()) {
      if (p->var->has_grad()) CHECK(p->grad().data()[0] == 0.0);
    }
  }
  SUBCASE("target independent of the tap gives a zero map") {
    for (auto& p : net.params()) {
      if (p->name == "head.fc.weight") p->value().fill(0.0);
    }
    const auto cam = gradcam(net, img, 0, "stage2.block1");
    for (double v : cam.heatmap.v) CHECK(v == 0.0);
  }
  SUBCASE("channel weights match a finite-difference oracle") {
    // At the last stage of a 32x32 input the map is 1x1, and the head after
    // it is norm -> mean -> linear, which the oracle differentiates numerically.
    const std::vector<std::string> taps{"stage4"};
    Tape<double> tape;
    tape.set_grad_enabled(false);
    const RgbImage* p[] = {&img};
    Tensor64 x;
    images_to_tensor<double>(p, x);
    const Tensor64 a = net.forward(tape, tape.constant(x), taps).taps.at("stage4")->value;
    REQUIRE(a.shape().h == 1);
    auto head = [&](const Tensor64& t) {
      Tape<double> h;
      h.set_grad_enabled(false);
      const auto& ps = net.params();
      auto v = norm_channels(h, h.constant(t), ps.find("head.norm.gamma")->var, ps.find("head.norm.beta")->var);
      return linear(h, spatial_mean(h, v), ps.find("head.fc.weight")->var, ps.find("head.fc.bias")->var)->value[1];
    };
    double expect = 0.0;
    for (int64_t c = 0; c < a.shape().c; ++c) {
      Tensor64 up = a, dn = a;
      up[c] += 1e-5;
      dn[c] -= 1e-5;
      expect += (head(up) - head(dn)) / 2e-5 * a[c];
    }
    const auto cam = gradcam(net, img, 1, "stage4");
    CHECK(cam.coarse.at(0, 0) == doctest::Approx(std::max(expect, 0.0)).epsilon(1e-6));
    CHECK(cam.target_logit == doctest::Approx(head(a)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(gradcam(net, img, 2, "stage3"), std::invalid_argument);
  CHECK_THROWS_AS(gradcam(net, img, 0, "stage7"), std::invalid_argument);
}

TEST_CASE("bilinear resize and quartile overlap") {
  Plane p(2, 2);
  p.at(0, 0) = 0.0;
  p.at(0, 1) = 1.0;
  p.at(1, 0) = 2.0;
  p.at(1, 1) = 3.0;
  const Plane up = resize_bilinear(p, 4, 4);
  CHECK(up.at(0, 0) == 0.0);
  CHECK(up.at(3, 3) == 3.0);
  CHECK(up.at(1, 1) == doctest::Approx(0.75));
  CHECK(up.at(1, 2) == doctest::Approx(1.25));
  Plane a(4, 4), b(4, 4);
  for (int i = 0; i < 16; ++i) {
    a.v[static_cast<size_t>(i)] = i;
    b.v[static_cast<size_t>(i)] = -i;
  }
  CHECK(top_quartile_overlap(a, a) == 1.0);
  CHECK(top_quartile_overlap(a, b) == 0.0);
  b.v[15] = 100.0;
  CHECK(top_quartile_overlap(a, b) == 0.25);
  CHECK(plane_csv(p) == "0,1\n2,3\n");
}

TEST_CASE("occlusion sensitivity oracle") {
  MkfaNet<double> net(preset("micro"), 4);
  const RgbImage& img = small_data().images[45];
  const Plane occ = occlusion_map(net, img, 1, 16, 16);
  // Four disjoint patches: each pixel carries its own patch's logit drop.
  Tape<double> tape;
  tape.set_grad_enabled(false);
  const RgbImage* p[] = {&img};
  Tensor64 x;
  images_to_tensor<double>(p, x);
  const double ref = net.forward(tape, tape.constant(x)).logits->value[1];
  Tensor64 masked = x;
  for (int c = 0; c < 3; ++c)
    for (int y = 16; y < 32; ++y)
      for (int xx = 0; xx < 16; ++xx) masked(0, c, y, xx) = 0.0;
  const double drop = ref - net.forward(tape, tape.constant(masked)).logits->value[1];
  CHECK(occ.at(20, 5) == doctest::Approx(drop).epsilon(1e-12));
  CHECK(occ.at(31, 15) == doctest::Approx(drop).epsilon(1e-12));
}
