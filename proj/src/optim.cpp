#include "mkfa/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mkfa {

const char* to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "adamw"; }

OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "adamw") return OptimizerKind::adamw;
  throw std::invalid_argument("unknown optimizer '" + s + "' (expected adam or adamw)");
}

void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = {{"kind", to_string(c.kind)},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"eps", c.eps},
       {"weight_decay", c.weight_decay}};
}

void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  OptimizerConfig d;
  c.kind = parse_optimizer_kind(j.value("kind", std::string(to_string(d.kind))));
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
}

template <typename T>
void Optimizer<T>::ensure_state(const ParamRegistry<T>& params) {
  if (m_.size() == params.size()) return;
  if (!m_.empty()) throw std::invalid_argument("optimizer state does not match the parameter registry");
  for (const auto& p : params) {
    m_.emplace_back(static_cast<size_t>(p->value().numel()), T(0));
    v_.emplace_back(static_cast<size_t>(p->value().numel()), T(0));
  }
}

template <typename T>
void Optimizer<T>::step(ParamRegistry<T>& params, double lr) {
  ensure_state(params);
  for (const auto& p : params) {
    if (!p->trainable || !p->var->has_grad()) continue;
    if (!p->grad().all_finite()) throw NumericError("non-finite gradient in parameter " + p->name);
  }
  ++step_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const double decay = config_.kind == OptimizerKind::adamw ? 1.0 - lr * config_.weight_decay : 1.0;
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.trainable) continue;
    T* w = p.value().ptr();
    const T* g = p.var->has_grad() ? p.grad().ptr() : nullptr;
    T* m = m_[i].data();
    T* v = v_[i].data();
    for (int64_t k = 0, n = p.value().numel(); k < n; ++k) {
      const double gk = g ? static_cast<double>(g[k]) : 0.0;
      const double mk = b1 * m[k] + (1.0 - b1) * gk;
      const double vk = b2 * v[k] + (1.0 - b2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double delta = lr * (mk / c1) / (std::sqrt(vk / c2) + config_.eps);
      w[k] = static_cast<T>(static_cast<double>(w[k]) * decay - delta);
    }
    if (p.var->has_grad()) p.zero_grad();
  }
}

template class Optimizer<float>;
template class Optimizer<double>;

double LrSchedule::at(int64_t step) const {
  if (step < 0) throw std::invalid_argument("learning-rate step must be non-negative");
  if (step < warmup_steps) return base * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const int64_t span = total_steps - warmup_steps;
  if (span <= 0 || step == warmup_steps) return base;
  const double t = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(span));
  return min + 0.5 * (base - min) * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace mkfa
