#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "mkfa/autodiff.hpp"

namespace mkfa {

enum class OptimizerKind { adam, adamw };

const char* to_string(OptimizerKind k);
OptimizerKind parse_optimizer_kind(const std::string& s);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // adamw only
};

void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);

/// Adam with bias correction: p -= lr * m_hat / (sqrt(v_hat) + eps).
/// AdamW first scales p by (1 - lr * wd). Moments share the parameter precision.
template <typename T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config = {}) : config_(config) {}

  /// Applies one update to every trainable parameter, then zeroes grads.
  /// A non-finite gradient throws NumericError naming the parameter and
  /// leaves all parameters untouched.
  void step(ParamRegistry<T>& params, double lr);

  const OptimizerConfig& config() const { return config_; }
  int64_t steps() const { return step_; }
  void set_steps(int64_t s) { step_ = s; }

  // Moment buffers, one per registry entry (empty until the first step).
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }

 private:
  void ensure_state(const ParamRegistry<T>& params);

  OptimizerConfig config_;
  int64_t step_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

/// Linear warmup from 0 to `base` over `warmup_steps`, then cosine decay to
/// `min` at `total_steps`.
struct LrSchedule {
  double base = 2e-4;
  double min = 0.0;
  int64_t warmup_steps = 0;
  int64_t total_steps = 1;

  double at(int64_t step) const;
};

}  // namespace mkfa
