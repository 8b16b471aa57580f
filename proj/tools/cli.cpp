#include "cli.hpp"

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mkfa/checkpoint.hpp"
#include "mkfa/gradcam.hpp"
#include "mkfa/gradcheck.hpp"
#include "mkfa/parallel.hpp"
#include "mkfa/spectral.hpp"
#include "mkfa/synth.hpp"
#include "mkfa/train.hpp"

namespace mkfa {
namespace {

namespace fs = std::filesystem;

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw std::runtime_error("cannot create output directory " + dir.string());
}

// Every option of the subcommand with its effective value (given or default).
nlohmann::json resolved_options(const CLI::App& app) {
  nlohmann::json j = nlohmann::json::object();
  for (const CLI::Option* opt : app.get_options()) {
    if (opt->get_name() == "--help" || opt->get_name() == "-h") continue;
    std::string name = opt->get_name(false, true);
    if (name.rfind("--", 0) == 0) name = name.substr(2);
    if (opt->count() > 0) {
      const auto& r = opt->results();
      if (opt->get_expected_min() == 0) {
        j[name] = true;
      } else if (r.size() == 1) {
        j[name] = r[0];
      } else {
        j[name] = r;
      }
    } else if (opt->get_expected_min() == 0) {
      j[name] = false;
    } else {
      j[name] = opt->get_default_str();
    }
  }
  return j;
}

void log_config(const std::string& command, const nlohmann::json& options, const nlohmann::json& extra = nullptr) {
  nlohmann::json j = {{"command", command}, {"options", options}, {"threads", num_threads()}};
  if (!extra.is_null()) j["resolved"] = extra;
  std::cerr << j.dump() << std::endl;
}

Dataset load_dataset(const std::string& dir) { return Dataset::load(Manifest::load(dir)); }

AugmentPolicy parse_policy(const std::string& name) {
  if (name == "default") return AugmentPolicy{};
  if (name == "none") return AugmentPolicy::none();
  if (name == "full") return AugmentPolicy::full();
  throw std::invalid_argument("unknown augmentation policy '" + name + "'");
}

template <typename T>
EvalReport eval_checkpoint(const std::string& ckpt, const Dataset& data, const std::string& split) {
  const auto loaded = load_checkpoint<T>(ckpt);
  return evaluate(*loaded.model, data, split);
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Multi-kernel frequency aggregation network: data, training and analysis tools", "mkfa"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  int threads = num_threads();
  app.add_option("--threads", threads, "Worker threads (falls back to MKFA_THREADS)")->check(CLI::PositiveNumber);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic real/fake corpus");
  GeneratorSpec spec;
  int64_t n_real = 2500, n_fake = 2500;
  double test_fraction = 0.2;
  std::string gen_out;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--n-real", n_real, "Number of real images")->check(CLI::PositiveNumber);
  gen->add_option("--n-fake", n_fake, "Number of fake images")->check(CLI::PositiveNumber);
  gen->add_option("--test-fraction", test_fraction, "Per-class fraction in the test split")->check(CLI::Range(0.0, 0.99));
  gen->add_option("--size", spec.image_size, "Image size (32, 64, 128 or 256)")->check(CLI::IsMember({32, 64, 128, 256}));
  gen->add_option("--seed", spec.seed, "Generator seed");
  gen->add_option("--intensity", spec.intensity, "Artifact intensity in (0, 1]");
  gen->add_option("--alpha", spec.alpha, "Noise spectrum exponent");
  gen->add_option("--noise-std", spec.noise_std, "Noise standard deviation (gray levels)");
  gen->add_option("--sensor-noise-std", spec.sensor_noise_std, "White sensor noise standard deviation (gray levels)");
  gen->add_option("--blob-min", spec.blob_min, "Minimum number of blobs");
  gen->add_option("--blob-max", spec.blob_max, "Maximum number of blobs");

  // train
  auto* tr = app.add_subcommand("train", "Train a detector on a corpus");
  std::string preset_name = "micro", data_dir, train_out, optimizer = "adam", augment_name = "default", resume, init;
  std::string mf_variant = "literal_dc", spatial = "multi_dw7", channel = "ffn_mf";
  TrainConfig tc;
  std::optional<double> lr, wd;
  bool f64 = false;
  tr->add_option("--preset", preset_name, "Architecture preset (tiny, small, micro)")->check(CLI::IsMember(preset_names()));
  tr->add_option("--data", data_dir, "Corpus directory")->required();
  tr->add_option("--out", train_out, "Output directory")->required();
  tr->add_option("--epochs", tc.epochs, "Epochs")->check(CLI::PositiveNumber);
  tr->add_option("--batch", tc.batch_size, "Batch size")->check(CLI::PositiveNumber);
  tr->add_option("--seed", tc.seed, "Seed for init, shuffling and augmentation");
  tr->add_option("--optimizer", optimizer, "adam (from scratch) or adamw (fine-tuning)")->check(CLI::IsMember({"adam", "adamw"}));
  tr->add_option("--lr", lr, "Base learning rate [default: 2e-4 for adam, 5e-4 for adamw]");
  tr->add_option("--wd", wd, "AdamW weight decay [default: 0.05]");
  tr->add_option("--min-lr", tc.min_lr, "Final cosine learning rate");
  tr->add_option("--warmup", tc.warmup_epochs, "Warmup epochs");
  tr->add_option("--label-smoothing", tc.label_smoothing, "Label smoothing epsilon");
  tr->add_option("--augment", augment_name, "Augmentation policy: default (hflip), none, full")
      ->check(CLI::IsMember({"default", "none", "full"}));
  tr->add_option("--mf-variant", mf_variant, "literal_dc or two_param [default: preset]")->check(CLI::IsMember({"literal_dc", "two_param"}));
  tr->add_option("--spatial-mixer", spatial, "gating_only, single_dw7 or multi_dw7 [default: preset]")
      ->check(CLI::IsMember({"gating_only", "single_dw7", "multi_dw7"}));
  tr->add_option("--channel-mixer", channel, "ffn_only, ffn_se or ffn_mf [default: preset]")->check(CLI::IsMember({"ffn_only", "ffn_se", "ffn_mf"}));
  tr->add_option("--resume", resume, "Continue from a checkpoint of the same run");
  tr->add_option("--init", init, "Initialise weights from a checkpoint (fine-tuning)");
  tr->add_option("--stop-after-epoch", tc.stop_after_epoch, "Stop early after this epoch (0 = run all)");
  tr->add_flag("--f64", f64, "Train in 64-bit precision");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a corpus split");
  std::string ckpt, eval_split = "test", eval_out;
  ev->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data_dir, "Corpus directory")->required();
  ev->add_option("--split", eval_split, "Split (train or test)")->check(CLI::IsMember({"train", "test"}));
  ev->add_option("--out", eval_out, "Optional directory for eval.json");
  ev->add_flag("--f64", f64, "Evaluate in 64-bit precision");

  // spectrum
  auto* sp = app.add_subcommand("spectrum", "Corpus amplitude spectra (real vs fake)");
  std::string spec_out, spec_split;
  int bins = 32;
  sp->add_option("--data", data_dir, "Corpus directory")->required();
  sp->add_option("--out", spec_out, "Output directory")->required();
  sp->add_option("--bins", bins, "Radial bins")->check(CLI::Range(2, 4096));
  sp->add_option("--split", spec_split, "Restrict to a split (empty = all)");

  // feat-spectrum
  auto* fsp = app.add_subcommand("feat-spectrum", "Relative log amplitude of feature maps across depth");
  std::string taps = "stem1,stage1,stage2,stage3,stage4", feat_out, feat_split = "test";
  int64_t feat_n = 64;
  fsp->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  fsp->add_option("--data", data_dir, "Corpus directory")->required();
  fsp->add_option("--taps", taps, "Comma-separated taps, shallow to deep");
  fsp->add_option("--out", feat_out, "Output directory")->required();
  fsp->add_option("--n", feat_n, "Number of images")->check(CLI::PositiveNumber);
  fsp->add_option("--split", feat_split, "Split to draw images from")->check(CLI::IsMember({"train", "test"}));
  fsp->add_option("--bins", bins, "Radial bins")->check(CLI::Range(2, 4096));

  // gradcam
  auto* gc = app.add_subcommand("gradcam", "Grad-CAM heatmap for one image");
  std::string image_path, tap, cam_out;
  int target_class = 1;
  bool with_occlusion = false;
  gc->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  gc->add_option("--image", image_path, "PPM image")->required()->check(CLI::ExistingFile);
  gc->add_option("--tap", tap, "Feature tap [default: last block of stage 3]");
  gc->add_option("--class", target_class, "Target class (1 = fake)")->check(CLI::Range(0, 1));
  gc->add_option("--out", cam_out, "Output directory")->required();
  gc->add_flag("--occlusion", with_occlusion, "Also write the occlusion-sensitivity map and overlap");

  // gradcheck
  auto* gk = app.add_subcommand("gradcheck", "Finite-difference gradient checks of every op and block");
  uint64_t gk_seed = 1;
  int shapes = 5;
  double tol = 1e-5;
  gk->add_flag("--f64", f64, "Run in 64-bit mode (the checks always use 64-bit)");
  gk->add_option("--seed", gk_seed, "Seed for shapes and points");
  gk->add_option("--shapes", shapes, "Random shapes per op")->check(CLI::PositiveNumber);
  gk->add_option("--tol", tol, "Maximum relative error");

  // params
  auto* pa = app.add_subcommand("params", "Parameter count of a preset");
  bool as_json = false;
  pa->add_option("--preset", preset_name, "Architecture preset")->check(CLI::IsMember(preset_names()));
  pa->add_flag("--json", as_json, "Print JSON with the per-stage breakdown");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train the spatial/channel mixer ablation variants");
  std::string variants = "gating_only,single_dw7,multi_dw7,ffn_only,ffn_se,ffn_mf", ab_out;
  int64_t ab_epochs = 5;
  ab->add_option("--data", data_dir, "Corpus directory")->required();
  ab->add_option("--out", ab_out, "Output directory")->required();
  ab->add_option("--variants", variants, "Comma-separated variants");
  ab->add_option("--preset", preset_name, "Base architecture preset")->check(CLI::IsMember(preset_names()));
  ab->add_option("--epochs", ab_epochs, "Epochs per variant")->check(CLI::PositiveNumber);
  ab->add_option("--batch", tc.batch_size, "Batch size")->check(CLI::PositiveNumber);
  ab->add_option("--seed", tc.seed, "Seed");
  ab->add_option("--lr", lr, "Base learning rate [default: 2e-4]");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    set_num_threads(threads);
    if (*gen) {
      log_config("gen-data", resolved_options(*gen), spec);
      const Manifest m = gen_corpus(spec, n_real, n_fake, test_fraction, gen_out);
      std::cout << m.to_json()["counts"].dump() << "\n";
      return kExitOk;
    }
    if (*tr) {
      tc.arch = preset(preset_name);
      if (tr->count("--mf-variant")) tc.arch.mf_variant = parse_mf_variant(mf_variant);
      if (tr->count("--spatial-mixer")) tc.arch.spatial_mixer = parse_spatial_mixer(spatial);
      if (tr->count("--channel-mixer")) tc.arch.channel_mixer = parse_channel_mixer(channel);
      tc.optimizer.kind = parse_optimizer_kind(optimizer);
      const bool adamw = tc.optimizer.kind == OptimizerKind::adamw;
      tc.lr = lr.value_or(adamw ? 5e-4 : 2e-4);
      tc.optimizer.weight_decay = adamw ? wd.value_or(0.05) : 0.0;
      if (wd && !adamw) throw std::invalid_argument("--wd applies to adamw only");
      tc.augment = parse_policy(augment_name);
      tc.init_from = init;
      tc.validate();
      log_config("train", resolved_options(*tr), tc);
      const Dataset data = load_dataset(data_dir);
      const std::optional<fs::path> from = resume.empty() ? std::nullopt : std::optional<fs::path>(resume);
      auto report = [](const MetricsRow& r) { std::cout << r.csv() << std::endl; };
      std::cout << kMetricsHeader << std::endl;
      const auto res = f64 ? train<double>(tc, data, train_out, from, report) : train<float>(tc, data, train_out, from, report);
      std::cerr << "checkpoint " << res.checkpoint.string() << " after " << res.steps << " steps" << std::endl;
      return kExitOk;
    }
    if (*ev) {
      log_config("eval", resolved_options(*ev));
      const Dataset data = load_dataset(data_dir);
      const EvalReport r = f64 ? eval_checkpoint<double>(ckpt, data, eval_split) : eval_checkpoint<float>(ckpt, data, eval_split);
      const std::string text = r.to_json().dump(1);
      std::cout << text << "\n";
      if (!eval_out.empty()) {
        ensure_dir(eval_out);
        write_text(fs::path(eval_out) / "eval.json", text + "\n");
      }
      return kExitOk;
    }
    if (*sp) {
      log_config("spectrum", resolved_options(*sp));
      const Manifest m = Manifest::load(data_dir);
      const Dataset data = Dataset::load(m);
      std::vector<SpectrumSample> samples;
      for (size_t i : data.indices(spec_split)) samples.push_back({&data.images[i], data.labels[i], data.kinds[i]});
      const SpectrumReport rep = corpus_spectrum_stats(samples, bins);
      ensure_dir(spec_out);
      rep.write_csv(fs::path(spec_out) / "spectrum.csv");
      nlohmann::json summary = rep.meta;
      for (const auto& [name, series] : rep.series) {
        if (name.rfind("diff", 0) == 0) summary["high_band_" + name] = rep.band_mean(name);
      }
      std::cout << summary.dump(1) << "\n";
      return kExitOk;
    }
    if (*fsp) {
      log_config("feat-spectrum", resolved_options(*fsp));
      const auto loaded = load_checkpoint<float>(ckpt);
      const Dataset data = load_dataset(data_dir);
      std::vector<const RgbImage*> imgs;
      for (size_t i : data.indices(feat_split)) {
        if (static_cast<int64_t>(imgs.size()) == feat_n) break;
        imgs.push_back(&data.images[i]);
      }
      if (imgs.empty()) throw std::invalid_argument("no images in split " + feat_split);
      Tensor32 x;
      images_to_tensor<float>(imgs, x);
      const auto tap_list = split_list(taps);
      const SpectrumReport rep = feature_depth_profile(*loaded.model, x, tap_list, bins);
      ensure_dir(feat_out);
      rep.write_csv(fs::path(feat_out) / "feat_spectrum.csv");
      std::cout << rep.meta.dump() << "\n";
      return kExitOk;
    }
    if (*gc) {
      log_config("gradcam", resolved_options(*gc));
      const auto loaded = load_checkpoint<float>(ckpt);
      const RgbImage img = read_ppm(image_path);
      const std::string t = tap.empty() ? default_cam_tap(loaded.model->config()) : tap;
      const CamResult cam = gradcam(*loaded.model, img, target_class, t);
      ensure_dir(cam_out);
      write_ppm(fs::path(cam_out) / "cam_overlay.ppm", heatmap_overlay(img, cam.heatmap));
      write_text(fs::path(cam_out) / "cam.csv", plane_csv(cam.heatmap));
      nlohmann::json out = {{"tap", t}, {"target_class", target_class}, {"target_logit", cam.target_logit}};
      if (with_occlusion) {
        const Plane occ = occlusion_map(*loaded.model, img, target_class);
        write_text(fs::path(cam_out) / "occlusion.csv", plane_csv(occ));
        out["top_quartile_overlap"] = top_quartile_overlap(cam.heatmap, occ);
      }
      std::cout << out.dump() << "\n";
      return kExitOk;
    }
    if (*gk) {
      log_config("gradcheck", resolved_options(*gk));
      const auto results = run_gradcheck_suite(gk_seed, shapes, tol);
      bool ok = true;
      for (const auto& r : results) {
        char line[160];
        std::snprintf(line, sizeof(line), "%-4s %-32s %-28s max_rel_err=%.3e", r.report.passed ? "ok" : "FAIL",
                      r.name.c_str(), r.shape.c_str(), r.report.max_rel_error);
        std::cout << line << "\n";
        ok = ok && r.report.passed;
      }
      std::cout << results.size() << " checks, " << (ok ? "all passed" : "FAILURES") << std::endl;
      return ok ? kExitOk : kExitCheckFailed;
    }
    if (*pa) {
      log_config("params", resolved_options(*pa));
      const ArchConfig a = preset(preset_name);
      const ParamCount c = count_params(a);
      if (as_json) {
        nlohmann::json b = nlohmann::json::object();
        for (const auto& [k, v] : c.breakdown) b[k] = v;
        std::cout << nlohmann::json{{"preset", preset_name}, {"provenance", a.provenance}, {"total", c.total}, {"breakdown", b}}.dump(1)
                  << "\n";
      } else {
        std::cout << preset_name << " " << c.total << "\n";
      }
      return kExitOk;
    }
    if (*ab) {
      TrainConfig base;
      base.arch = preset(preset_name);
      base.epochs = ab_epochs;
      base.batch_size = tc.batch_size;
      base.seed = tc.seed;
      base.lr = lr.value_or(2e-4);
      std::vector<AblationVariant> vs;
      for (const auto& v : split_list(variants)) vs.push_back(parse_ablation_variant(v));
      log_config("ablate", resolved_options(*ab), base);
      const Dataset data = load_dataset(data_dir);
      const auto rows = ablate<float>(base, data, vs, ab_out);
      const std::string csv = ablation_csv(rows);
      write_text(fs::path(ab_out) / "ablation.csv", csv);
      std::cout << csv;
      return kExitOk;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace mkfa
