#pragma once

#include <array>
#include <span>
#include <vector>

#include "mkfa/autodiff.hpp"

namespace mkfa {

struct Conv2dOptions {
  std::array<int64_t, 2> stride{1, 1};
  std::array<int64_t, 2> padding{0, 0};
  std::array<int64_t, 2> dilation{1, 1};
  int64_t groups = 1;
};

/// Output extent along one axis: floor((in + 2 pad - dil (k - 1) - 1) / stride) + 1.
int64_t conv_output_extent(int64_t in, int64_t kernel, int64_t stride, int64_t pad, int64_t dilation);

/// Grouped 2-D convolution. weight is Cout x (Cin/groups) x Kh x Kw, bias
/// (optional, may be null) is 1 x Cout x 1 x 1.
template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& input, const Var<T>& weight, const Var<T>& bias,
              const Conv2dOptions& opt);

enum class Activation { silu, gelu, sigmoid, relu };

/// Elementwise activation; GELU is the exact x * Phi(x) form.
template <typename T>
Var<T> activation(Tape<T>& tape, Activation kind, const Var<T>& x);

/// Per-location standardization across channels with a per-channel affine
/// (gamma, beta are 1 x C x 1 x 1).
template <typename T>
Var<T> norm_channels(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                     double eps = 1e-6);

template <typename T>
std::vector<Var<T>> split_channels(Tape<T>& tape, const Var<T>& x, std::span<const int64_t> sizes);

template <typename T>
Var<T> concat_channels(Tape<T>& tape, std::span<const Var<T>> parts);

/// Per-(n, c) mean over H x W, shape N x C x 1 x 1. A spatially constant
/// plane yields exactly its value.
template <typename T>
Var<T> spatial_mean(Tape<T>& tape, const Var<T>& x);

enum class Binary { add, sub, mul };

/// a (op) b where b has a's shape or is N x C x 1 x 1 / 1 x C x 1 x 1.
template <typename T>
Var<T> elementwise(Tape<T>& tape, Binary kind, const Var<T>& a, const Var<T>& b);

/// x flattened to N x F; weight is F x K x 1 x 1, bias 1 x K x 1 x 1. Output N x K x 1 x 1.
template <typename T>
Var<T> linear(Tape<T>& tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

/// Mean label-smoothed cross entropy over rows of N x K logits.
template <typename T>
Var<T> cross_entropy_smoothed(Tape<T>& tape, const Var<T>& logits, std::span<const int> labels,
                              double epsilon);

/// Scalar sum of all elements.
template <typename T>
Var<T> sum(Tape<T>& tape, const Var<T>& x);

/// Scalar sum of weights * x (weights fixed, same shape as x).
template <typename T>
Var<T> weighted_sum(Tape<T>& tape, const Var<T>& x, const Tensor<T>& weights);

}  // namespace mkfa
