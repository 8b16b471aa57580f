#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mkfa/checkpoint.hpp"
#include "mkfa/metrics.hpp"
#include "mkfa/model.hpp"
#include "mkfa/optim.hpp"
#include "mkfa/synth.hpp"

namespace mkfa {

struct TrainConfig {
  ArchConfig arch = preset("micro");
  int64_t epochs = 20;
  int64_t batch_size = 32;
  double lr = 2e-4;
  double min_lr = 1e-6;
  double warmup_epochs = 1.0;
  double label_smoothing = 0.1;
  OptimizerConfig optimizer;
  AugmentPolicy augment;
  uint64_t seed = 7;
  // Stop after this many optimizer steps (0 = no cap). The schedule still
  // spans the full `epochs`.
  int64_t max_steps = 0;
  // Stop after this epoch (0 = run all). Used to produce resumable snapshots.
  int64_t stop_after_epoch = 0;
  bool evaluate_test = true;
  // Checkpoint whose weights initialise the model (fine-tuning); empty for
  // training from scratch. Ignored when resuming.
  std::string init_from;
  bool keep_epoch_checkpoints = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Decoded images of a manifest, in manifest order.
struct Dataset {
  std::vector<RgbImage> images;
  std::vector<int> labels;
  std::vector<std::string> kinds;  // empty for reals
  std::vector<std::string> splits;

  static Dataset load(const Manifest& manifest);
  std::vector<size_t> indices(const std::string& split) const;
};

struct MetricsRow {
  int64_t epoch = 0;
  int64_t step = 0;
  double loss = 0.0;
  double train_auc = 0.0;
  std::optional<double> test_auc;
  double lr = 0.0;

  std::string csv() const;
};

inline constexpr const char* kMetricsHeader = "epoch,step,loss,train_auc,test_auc,lr";

struct EvalReport {
  double auc = 0.5;
  double accuracy = 0.0;
  double loss = 0.0;
  int64_t samples = 0;
  int64_t n_real = 0;
  int64_t n_fake = 0;
  AucCounts counts;
  std::map<std::string, double> kind_auc;
  std::map<std::string, AucCounts> kind_counts;
  std::vector<double> scores;  // fake probability, in split order

  nlohmann::json to_json() const;
};

/// Softmax probability of the fake class for every image, in batches.
template <typename T>
std::vector<double> score_images(const MkfaNet<T>& model, const std::vector<const RgbImage*>& images,
                                 int64_t batch = 64, std::vector<std::array<double, 2>>* logits = nullptr);

template <typename T>
EvalReport evaluate(const MkfaNet<T>& model, const Dataset& data, const std::string& split);

struct TrainResult {
  std::vector<MetricsRow> metrics;
  std::filesystem::path checkpoint;
  int64_t steps = 0;
};

/// Progress hook, called after every epoch.
using EpochCallback = std::function<void(const MetricsRow&)>;

/// Trains from scratch, or continues from `resume` (a checkpoint written by
/// an earlier run of the same config). Writes out_dir/metrics.csv and
/// out_dir/checkpoint.mkfa after every epoch.
template <typename T>
TrainResult train(const TrainConfig& config, const Dataset& data, const std::filesystem::path& out_dir,
                  const std::optional<std::filesystem::path>& resume = std::nullopt,
                  const EpochCallback& on_epoch = nullptr);

/// Trains `steps` full-batch steps on the train split and returns the train
/// accuracy after each step.
template <typename T>
std::vector<double> overfit_curve(const TrainConfig& config, const Dataset& data, int64_t steps);

struct AblationVariant {
  std::string name;  // row label
  SpatialMixer spatial;
  ChannelMixer channel;
};

/// The six ablation rows, in order.
std::vector<AblationVariant> ablation_variants();
AblationVariant parse_ablation_variant(const std::string& name);

struct AblationRow {
  AblationVariant variant;
  int64_t params = 0;
  double test_auc = 0.0;
};

/// Trains every variant under the same config and seed; variants with an
/// identical architecture are trained once.
template <typename T>
std::vector<AblationRow> ablate(const TrainConfig& base, const Dataset& data, const std::vector<AblationVariant>& variants,
                                const std::filesystem::path& out_dir);

std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace mkfa
