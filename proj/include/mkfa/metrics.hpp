#pragma once

#include <cstdint>
#include <span>

namespace mkfa {

/// Mann-Whitney pair counts. `twice_wins` counts a fake-over-real pair as 2
/// and a tie as 1, so the statistic stays an exact integer.
struct AucCounts {
  uint64_t twice_wins = 0;
  uint64_t pairs = 0;  // n_fake * n_real

  double auc() const { return static_cast<double>(twice_wins) / (2.0 * static_cast<double>(pairs)); }
};

/// Labels are 0 (real) or 1 (fake); higher score means more likely fake.
/// Throws std::invalid_argument unless both classes are present.
AucCounts auc_counts(std::span<const double> scores, std::span<const int> labels);
double auc(std::span<const double> scores, std::span<const int> labels);

/// Fraction of samples whose thresholded score matches the label.
double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);

}  // namespace mkfa
