#include "mkfa/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "mkfa/ops.hpp"
#include "mkfa/parallel.hpp"

namespace mkfa {
namespace {

// Stream ids for the per-purpose RNG substreams.
constexpr uint64_t kShuffleStream = 0x5f;
constexpr uint64_t kAugmentStream = 0xa6;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

double fake_probability(double l0, double l1) { return 1.0 / (1.0 + std::exp(l0 - l1)); }

template <typename T>
Tensor<T> batch_tensor(const std::vector<RgbImage>& batch) {
  std::vector<const RgbImage*> ptrs;
  for (const auto& im : batch) ptrs.push_back(&im);
  Tensor<T> t;
  images_to_tensor<T>(ptrs, t);
  return t;
}

nlohmann::json config_identity(const TrainConfig& c) {
  nlohmann::json j = c;
  j.erase("stop_after_epoch");
  j.erase("max_steps");
  j.erase("keep_epoch_checkpoints");
  return j;
}

void write_metrics(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << kMetricsHeader << '\n';
  for (const auto& r : rows) f << r.csv() << '\n';
}

}  // namespace

void TrainConfig::validate() const {
  arch.validate();
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (!(lr >= 0.0)) throw std::invalid_argument("learning rate must be non-negative");
  if (!(min_lr >= 0.0)) throw std::invalid_argument("min lr must be non-negative");
  if (!(warmup_epochs >= 0.0)) throw std::invalid_argument("warmup epochs must be non-negative");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw std::invalid_argument("label smoothing must be in [0, 1)");
  if (max_steps < 0 || stop_after_epoch < 0) throw std::invalid_argument("step and epoch caps must be non-negative");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"arch", c.arch},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"min_lr", c.min_lr},
       {"warmup_epochs", c.warmup_epochs},
       {"label_smoothing", c.label_smoothing},
       {"optimizer", c.optimizer},
       {"augment", c.augment},
       {"seed", c.seed},
       {"max_steps", c.max_steps},
       {"stop_after_epoch", c.stop_after_epoch},
       {"evaluate_test", c.evaluate_test},
       {"init_from", c.init_from},
       {"keep_epoch_checkpoints", c.keep_epoch_checkpoints}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  if (!j.contains("arch")) {
    c.arch = d.arch;
  } else if (j.at("arch").is_string()) {
    c.arch = preset(j.at("arch").get<std::string>());
  } else {
    c.arch = j.at("arch").get<ArchConfig>();
  }
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.min_lr = j.value("min_lr", d.min_lr);
  c.warmup_epochs = j.value("warmup_epochs", d.warmup_epochs);
  c.label_smoothing = j.value("label_smoothing", d.label_smoothing);
  c.optimizer = j.contains("optimizer") ? j.at("optimizer").get<OptimizerConfig>() : d.optimizer;
  c.augment = j.contains("augment") ? j.at("augment").get<AugmentPolicy>() : d.augment;
  c.seed = j.value("seed", d.seed);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.stop_after_epoch = j.value("stop_after_epoch", d.stop_after_epoch);
  c.evaluate_test = j.value("evaluate_test", d.evaluate_test);
  c.init_from = j.value("init_from", d.init_from);
  c.keep_epoch_checkpoints = j.value("keep_epoch_checkpoints", d.keep_epoch_checkpoints);
}

Dataset Dataset::load(const Manifest& manifest) {
  Dataset d;
  const size_t n = manifest.samples.size();
  d.images.resize(n);
  parallel_for(static_cast<int64_t>(n), [&](int64_t i) {
    d.images[static_cast<size_t>(i)] = read_ppm(manifest.root / manifest.samples[static_cast<size_t>(i)].path);
  });
  for (const auto& r : manifest.samples) {
    d.labels.push_back(r.label);
    d.kinds.push_back(r.kind ? to_string(*r.kind) : "");
    d.splits.push_back(r.split);
  }
  return d;
}

std::vector<size_t> Dataset::indices(const std::string& split) const {
  std::vector<size_t> out;
  for (size_t i = 0; i < splits.size(); ++i) {
    if (split.empty() || splits[i] == split) out.push_back(i);
  }
  return out;
}

std::string MetricsRow::csv() const {
  return std::to_string(epoch) + "," + std::to_string(step) + "," + fmt(loss) + "," + fmt(train_auc) + "," +
         (test_auc ? fmt(*test_auc) : std::string("nan")) + "," + fmt(lr);
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json kinds = nlohmann::json::object();
  for (const auto& [k, v] : kind_auc) {
    kinds[k] = {{"auc", v}, {"pairs", kind_counts.at(k).pairs}};
  }
  return {{"auc", auc},           {"accuracy", accuracy}, {"loss", loss},   {"samples", samples},
          {"n_real", n_real},     {"n_fake", n_fake},     {"kinds", kinds}, {"pairs", counts.pairs}};
}

template <typename T>
std::vector<double> score_images(const MkfaNet<T>& model, const std::vector<const RgbImage*>& images, int64_t batch,
                                 std::vector<std::array<double, 2>>* logits) {
  if (model.config().num_classes != 2) throw std::invalid_argument("scoring needs a two-class model");
  std::vector<double> scores;
  scores.reserve(images.size());
  for (size_t start = 0; start < images.size(); start += static_cast<size_t>(batch)) {
    const size_t end = std::min(images.size(), start + static_cast<size_t>(batch));
    Tensor<T> x;
    images_to_tensor<T>(std::span<const RgbImage* const>(images.data() + start, end - start), x);
    Tape<T> tape;
    tape.set_grad_enabled(false);
    const auto out = model.forward(tape, tape.constant(std::move(x))).logits->value;
    for (int64_t n = 0; n < out.shape().n; ++n) {
      const double l0 = out(n, 0, 0, 0), l1 = out(n, 1, 0, 0);
      scores.push_back(fake_probability(l0, l1));
      if (logits) logits->push_back({l0, l1});
    }
  }
  return scores;
}

template <typename T>
EvalReport evaluate(const MkfaNet<T>& model, const Dataset& data, const std::string& split) {
  const auto idx = data.indices(split);
  if (idx.empty()) throw std::invalid_argument("evaluate: split '" + split + "' is empty");
  std::vector<const RgbImage*> imgs;
  std::vector<int> labels;
  for (size_t i : idx) {
    imgs.push_back(&data.images[i]);
    labels.push_back(data.labels[i]);
  }
  std::vector<std::array<double, 2>> logits;
  EvalReport r;
  r.scores = score_images(model, imgs, 64, &logits);
  r.counts = auc_counts(r.scores, labels);
  r.auc = r.counts.auc();
  r.accuracy = accuracy(r.scores, labels);
  r.samples = static_cast<int64_t>(idx.size());
  double loss = 0.0;
  for (size_t i = 0; i < idx.size(); ++i) {
    const auto [l0, l1] = logits[i];
    const double mx = std::max(l0, l1);
    const double lse = mx + std::log(std::exp(l0 - mx) + std::exp(l1 - mx));
    loss += lse - (labels[i] == 1 ? l1 : l0);
    (labels[i] == 1 ? r.n_fake : r.n_real) += 1;
  }
  r.loss = loss / static_cast<double>(idx.size());
  std::set<std::string> kinds;
  for (size_t i : idx) {
    if (data.labels[i] == 1 && !data.kinds[i].empty()) kinds.insert(data.kinds[i]);
  }
  for (const auto& k : kinds) {
    std::vector<double> s;
    std::vector<int> l;
    for (size_t j = 0; j < idx.size(); ++j) {
      if (labels[j] == 0 || data.kinds[idx[j]] == k) {
        s.push_back(r.scores[j]);
        l.push_back(labels[j]);
      }
    }
    r.kind_counts[k] = auc_counts(s, l);
    r.kind_auc[k] = r.kind_counts[k].auc();
  }
  return r;
}

namespace {

template <typename T>
struct Trainer {
  const TrainConfig& config;
  const Dataset& data;
  MkfaNet<T>& model;
  Optimizer<T>& optimizer;
  std::vector<size_t> train_idx;

  // One optimizer step on the given dataset indices. Returns the batch loss
  // and appends fake probabilities for the (augmented) inputs.
  double step(const std::vector<size_t>& batch, int64_t epoch, double lr, std::vector<double>* scores) {
    std::vector<RgbImage> imgs(batch.size());
    std::vector<int> labels(batch.size());
    const SeededRng aug_root = SeededRng(config.seed, kAugmentStream).split(static_cast<uint64_t>(epoch));
    parallel_for(static_cast<int64_t>(batch.size()), [&](int64_t i) {
      const size_t k = batch[static_cast<size_t>(i)];
      SeededRng rng = aug_root.split(k);
      imgs[static_cast<size_t>(i)] = augment(data.images[k], config.augment, rng);
    });
    for (size_t i = 0; i < batch.size(); ++i) labels[i] = data.labels[batch[i]];
    Tape<T> tape;
    const auto out = model.forward(tape, tape.constant(batch_tensor<T>(imgs)));
    const auto loss = cross_entropy_smoothed(tape, out.logits, labels, config.label_smoothing);
    const double value = static_cast<double>(loss->value[0]);
    if (!std::isfinite(value)) throw NumericError("non-finite loss at step " + std::to_string(optimizer.steps()));
    if (scores) {
      for (int64_t n = 0; n < out.logits->value.shape().n; ++n) {
        scores->push_back(fake_probability(out.logits->value(n, 0, 0, 0), out.logits->value(n, 1, 0, 0)));
      }
    }
    tape.backward(loss);
    optimizer.step(model.params(), lr);
    return value;
  }
};

bool has_both_classes(const Dataset& data, const std::vector<size_t>& idx) {
  bool real = false, fake = false;
  for (size_t i : idx) (data.labels[i] == 1 ? fake : real) = true;
  return real && fake;
}

}  // namespace

template <typename T>
TrainResult train(const TrainConfig& config, const Dataset& data, const std::filesystem::path& out_dir,
                  const std::optional<std::filesystem::path>& resume, const EpochCallback& on_epoch) {
  config.validate();
  const auto train_idx = data.indices("train");
  if (!has_both_classes(data, train_idx)) throw std::invalid_argument("train split must contain both classes");
  const auto test_idx = data.indices("test");
  const bool eval_test = config.evaluate_test && has_both_classes(data, test_idx);
  std::filesystem::create_directories(out_dir);

  MkfaNet<T> model(config.arch, config.seed);
  Optimizer<T> optimizer(config.optimizer);
  std::vector<MetricsRow> rows;
  int64_t first_epoch = 1;
  if (resume) {
    auto ck = load_checkpoint<T>(*resume);
    const nlohmann::json& tr = ck.training;
    if (!tr.contains("config") || config_identity(tr.at("config").get<TrainConfig>()) != config_identity(config)) {
      throw std::invalid_argument("checkpoint " + resume->string() + " was written by a different training config");
    }
    if (!ck.optimizer) throw std::invalid_argument("checkpoint has no optimizer state to resume from");
    model.load_from(*ck.model);
    optimizer = *ck.optimizer;
    for (const auto& r : tr.at("metrics")) {
      MetricsRow m;
      m.epoch = r.at("epoch");
      m.step = r.at("step");
      m.loss = r.at("loss");
      m.train_auc = r.at("train_auc");
      if (!r.at("test_auc").is_null()) m.test_auc = r.at("test_auc").get<double>();
      m.lr = r.at("lr");
      rows.push_back(m);
    }
    first_epoch = tr.at("epoch").get<int64_t>() + 1;
  } else if (!config.init_from.empty()) {
    const auto init = load_checkpoint<T>(config.init_from);
    if (nlohmann::json(init.model->config()) != nlohmann::json(config.arch)) {
      throw std::invalid_argument("checkpoint " + config.init_from + " has a different architecture");
    }
    model.load_from(*init.model);
  }

  const auto n = static_cast<int64_t>(train_idx.size());
  const int64_t per_epoch = (n + config.batch_size - 1) / config.batch_size;
  LrSchedule sched{config.lr, config.min_lr, std::llround(config.warmup_epochs * static_cast<double>(per_epoch)),
                   config.epochs * per_epoch};
  Trainer<T> trainer{config, data, model, optimizer, train_idx};
  TrainResult result;
  result.checkpoint = out_dir / "checkpoint.mkfa";
  const int64_t last_epoch = config.stop_after_epoch > 0 ? std::min(config.epochs, config.stop_after_epoch) : config.epochs;
  bool capped = false;
  for (int64_t epoch = first_epoch; epoch <= last_epoch && !capped; ++epoch) {
    std::vector<size_t> order = train_idx;
    SeededRng shuffle = SeededRng(config.seed, kShuffleStream).split(static_cast<uint64_t>(epoch));
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    std::vector<double> scores;
    std::vector<int> labels;
    double loss_sum = 0.0, lr = 0.0;
    int64_t seen = 0;
    for (int64_t b = 0; b < per_epoch; ++b) {
      if (config.max_steps > 0 && optimizer.steps() >= config.max_steps) {
        capped = true;
        break;
      }
      const auto begin = order.begin() + b * config.batch_size;
      const auto end = order.begin() + std::min(n, (b + 1) * config.batch_size);
      const std::vector<size_t> batch(begin, end);
      lr = sched.at(optimizer.steps() + 1);
      loss_sum += trainer.step(batch, epoch, lr, &scores) * static_cast<double>(batch.size());
      seen += static_cast<int64_t>(batch.size());
      for (size_t k : batch) labels.push_back(data.labels[k]);
    }
    if (seen == 0) break;
    MetricsRow row;
    row.epoch = epoch;
    row.step = optimizer.steps();
    row.loss = loss_sum / static_cast<double>(seen);
    bool both = std::count(labels.begin(), labels.end(), 1) > 0 && std::count(labels.begin(), labels.end(), 0) > 0;
    row.train_auc = both ? auc(scores, labels) : std::nan("");
    if (eval_test) row.test_auc = evaluate(model, data, "test").auc;
    row.lr = lr;
    rows.push_back(row);

    nlohmann::json metrics = nlohmann::json::array();
    for (const auto& r : rows) {
      metrics.push_back({{"epoch", r.epoch},
                         {"step", r.step},
                         {"loss", r.loss},
                         {"train_auc", r.train_auc},
                         {"test_auc", r.test_auc ? nlohmann::json(*r.test_auc) : nlohmann::json(nullptr)},
                         {"lr", r.lr}});
    }
    const nlohmann::json training = {{"config", config}, {"epoch", epoch}, {"step", optimizer.steps()}, {"metrics", metrics}};
    save_checkpoint(result.checkpoint, model, &optimizer, training);
    if (config.keep_epoch_checkpoints) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%03lld.mkfa", static_cast<long long>(epoch));
      std::filesystem::copy_file(result.checkpoint, out_dir / name, std::filesystem::copy_options::overwrite_existing);
    }
    write_metrics(out_dir / "metrics.csv", rows);
    if (on_epoch) on_epoch(row);
  }
  result.metrics = rows;
  result.steps = optimizer.steps();
  return result;
}

template <typename T>
std::vector<double> overfit_curve(const TrainConfig& config, const Dataset& data, int64_t steps) {
  config.validate();
  const auto idx = data.indices("train");
  if (!has_both_classes(data, idx)) throw std::invalid_argument("train split must contain both classes");
  MkfaNet<T> model(config.arch, config.seed);
  Optimizer<T> optimizer(config.optimizer);
  Trainer<T> trainer{config, data, model, optimizer, idx};
  std::vector<const RgbImage*> imgs;
  std::vector<int> labels;
  for (size_t i : idx) {
    imgs.push_back(&data.images[i]);
    labels.push_back(data.labels[i]);
  }
  const auto n = static_cast<int64_t>(idx.size());
  const int64_t per_epoch = (n + config.batch_size - 1) / config.batch_size;
  std::vector<double> acc;
  for (int64_t s = 0; s < steps; ++s) {
    const int64_t b = s % per_epoch;
    const std::vector<size_t> batch(idx.begin() + b * config.batch_size,
                                    idx.begin() + std::min(n, (b + 1) * config.batch_size));
    trainer.step(batch, s / per_epoch, config.lr, nullptr);
    acc.push_back(accuracy(score_images(model, imgs), labels));
  }
  return acc;
}

std::vector<AblationVariant> ablation_variants() {
  return {{"gating_only", SpatialMixer::gating_only, ChannelMixer::ffn_only},
          {"single_dw7", SpatialMixer::single_dw7, ChannelMixer::ffn_only},
          {"multi_dw7", SpatialMixer::multi_dw7, ChannelMixer::ffn_only},
          {"ffn_only", SpatialMixer::multi_dw7, ChannelMixer::ffn_only},
          {"ffn_se", SpatialMixer::multi_dw7, ChannelMixer::ffn_se},
          {"ffn_mf", SpatialMixer::multi_dw7, ChannelMixer::ffn_mf}};
}

AblationVariant parse_ablation_variant(const std::string& name) {
  for (const auto& v : ablation_variants()) {
    if (v.name == name) return v;
  }
  throw std::invalid_argument("unknown ablation variant '" + name +
                              "' (expected gating_only, single_dw7, multi_dw7, ffn_only, ffn_se or ffn_mf)");
}

template <typename T>
std::vector<AblationRow> ablate(const TrainConfig& base, const Dataset& data, const std::vector<AblationVariant>& variants,
                                const std::filesystem::path& out_dir) {
  if (variants.empty()) throw std::invalid_argument("no ablation variants given");
  std::map<std::pair<int, int>, std::pair<int64_t, double>> done;
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    const auto key = std::make_pair(static_cast<int>(v.spatial), static_cast<int>(v.channel));
    if (!done.count(key)) {
      TrainConfig c = base;
      c.arch.spatial_mixer = v.spatial;
      c.arch.channel_mixer = v.channel;
      c.arch.name = base.arch.name + "-" + to_string(v.spatial) + "-" + to_string(v.channel);
      c.evaluate_test = false;
      const auto dir = out_dir / (std::string(to_string(v.spatial)) + "-" + to_string(v.channel));
      const auto res = train<T>(c, data, dir);
      const auto ck = load_checkpoint<T>(res.checkpoint);
      done[key] = {count_params(c.arch).total, evaluate(*ck.model, data, "test").auc};
    }
    rows.push_back({v, done[key].first, done[key].second});
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  static const std::map<std::string, std::pair<std::string, std::string>> labels = {
      {"gating_only", {"MKA", "Gating Branch"}},       {"single_dw7", {"MKA", "+DWConv7x7"}},
      {"multi_dw7", {"MKA", "+Multi-DWConv7x7"}},      {"ffn_only", {"MFA", "DWConv3x3+FFN"}},
      {"ffn_se", {"MFA", "+SE"}},                      {"ffn_mf", {"MFA", "+MF"}}};
  std::string out = "variant,block,module,spatial_mixer,channel_mixer,params,test_auc\n";
  for (const auto& r : rows) {
    const auto& [block, module] = labels.at(r.variant.name);
    out += r.variant.name + "," + block + "," + module + "," + to_string(r.variant.spatial) + "," +
           to_string(r.variant.channel) + "," + std::to_string(r.params) + "," + fmt(r.test_auc) + "\n";
  }
  return out;
}

#define MKFA_INSTANTIATE(T)                                                                                      \
  template std::vector<double> score_images(const MkfaNet<T>&, const std::vector<const RgbImage*>&, int64_t,    \
                                            std::vector<std::array<double, 2>>*);                               \
  template EvalReport evaluate(const MkfaNet<T>&, const Dataset&, const std::string&);                          \
  template TrainResult train<T>(const TrainConfig&, const Dataset&, const std::filesystem::path&,                \
                                const std::optional<std::filesystem::path>&, const EpochCallback&);             \
  template std::vector<double> overfit_curve<T>(const TrainConfig&, const Dataset&, int64_t);                    \
  template std::vector<AblationRow> ablate<T>(const TrainConfig&, const Dataset&,                                \
                                              const std::vector<AblationVariant>&, const std::filesystem::path&);

MKFA_INSTANTIATE(float)
MKFA_INSTANTIATE(double)

}  // namespace mkfa
