#include "mkfa/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace mkfa {

GradCheckReport grad_check(const ScalarFn& fn, std::span<const Tensor64> points, double step,
                           double tolerance) {
  GradCheckReport report;
  std::vector<Tensor64> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& p : points) leaves.push_back(tape.variable(p));
    Var<double> out = fn(tape, leaves);
    tape.backward(out);
    for (auto& leaf : leaves) analytic.push_back(leaf->grad_buffer());
  }

  auto evaluate = [&](const std::vector<Tensor64>& inputs) {
    Tape<double> tape;
    tape.set_grad_enabled(false);
    std::vector<Var<double>> leaves;
    for (const auto& p : inputs) leaves.push_back(tape.constant(p));
    return fn(tape, leaves)->value[0];
  };

  std::vector<Tensor64> work(points.begin(), points.end());
  for (size_t i = 0; i < work.size(); ++i) {
    for (int64_t j = 0; j < work[i].numel(); ++j) {
      const double saved = work[i][j];
      auto at = [&](double offset) {
        work[i][j] = saved + offset;
        return evaluate(work);
      };
      auto five_point = [&](double h) { return (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h); };
      const double fd = (16.0 * five_point(step / 2.0) - five_point(step)) / 15.0;
      work[i][j] = saved;
      const double ad = analytic[i][j];
      const double err = std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), kRelativeFloor});
      ++report.coordinates;
      if (err > report.max_rel_error || report.worst.empty()) {
        if (err >= report.max_rel_error) {
          report.max_rel_error = err;
          report.worst = "input[" + std::to_string(i) + "] coordinate " + std::to_string(j);
          report.worst_analytic = ad;
          report.worst_numeric = fd;
        }
      }
    }
  }
  report.passed = report.max_rel_error <= tolerance;
  return report;
}

}  // namespace mkfa
