#include "mkfa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace mkfa {

AucCounts auc_counts(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: scores and labels differ in length");
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t{0});
  for (size_t i = 0; i < scores.size(); ++i) {
    if (std::isnan(scores[i])) throw std::invalid_argument("auc: NaN score at index " + std::to_string(i));
    if (labels[i] != 0 && labels[i] != 1) throw std::invalid_argument("auc: labels must be 0 or 1");
  }
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  uint64_t reals_below = 0, n_real = 0, n_fake = 0, twice = 0;
  for (size_t i = 0; i < order.size();) {
    size_t j = i;
    uint64_t group_real = 0, group_fake = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? group_fake : group_real) += 1;
      ++j;
    }
    twice += group_fake * (2 * reals_below + group_real);
    reals_below += group_real;
    n_real += group_real;
    n_fake += group_fake;
    i = j;
  }
  if (n_real == 0 || n_fake == 0) throw std::invalid_argument("auc: both classes must be present");
  return {twice, n_real * n_fake};
}

double auc(std::span<const double> scores, std::span<const int> labels) { return auc_counts(scores, labels).auc(); }

double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold) {
  if (scores.size() != labels.size() || scores.empty()) throw std::invalid_argument("accuracy: bad input sizes");
  size_t hit = 0;
  for (size_t i = 0; i < scores.size(); ++i) hit += (scores[i] > threshold ? 1 : 0) == labels[i];
  return static_cast<double>(hit) / static_cast<double>(scores.size());
}

}  // namespace mkfa
