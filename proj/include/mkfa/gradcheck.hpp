#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mkfa/autodiff.hpp"

namespace mkfa {

struct GradCheckReport {
  double max_rel_error = 0.0;
  int64_t coordinates = 0;
  std::string worst;  // "input[i] coordinate j" of the largest error
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = false;
};

/// Scalar-valued function of one or more tensors, evaluated in 64-bit mode.
using ScalarFn = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

inline constexpr double kRelativeFloor = 1e-6;

/// Compares reverse-mode gradients with central differences at every
/// coordinate of every input: five-point stencils at step and step/2,
/// Richardson-combined to sixth order. Relative error per coordinate is
/// |ad - fd| / max(|ad|, |fd|, kRelativeFloor).
GradCheckReport grad_check(const ScalarFn& fn, std::span<const Tensor64> points, double step = 1e-3,
                           double tolerance = 1e-5);

/// One named entry of the op-level suite.
struct OpCheckResult {
  std::string name;
  std::string shape;
  GradCheckReport report;
};

/// Gradient checks for every differentiable op and block on `shapes_per_op`
/// random configurations each.
std::vector<OpCheckResult> run_gradcheck_suite(uint64_t seed, int shapes_per_op, double tolerance);

}  // namespace mkfa
