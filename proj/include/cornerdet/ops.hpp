#pragma once

#include <vector>

#include "cornerdet/autodiff.hpp"
#include "cornerdet/tensor.hpp"

namespace cornerdet {

/// Cross-correlation over N x Cin x H x W with a Cout x Cin x kh x kw kernel.
/// Kernel extents must be odd and stride 1 or 2.
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weight, Var<T> bias, int stride, int padding);

/// Running statistics owned by a batch-norm layer.
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  explicit BatchNormState(std::size_t channels = 1)
      : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)) {}
};

struct BatchNormOptions {
  bool train = true;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel normalisation. Train mode uses (and differentiates through)
/// the batch statistics and updates `state`; eval mode uses `state`.
template <typename T>
Var<T> batchnorm2d(Var<T> input, Var<T> gamma, Var<T> beta, BatchNormState<T>& state,
                   const BatchNormOptions& opts);

template <typename T>
Var<T> relu(Var<T> x);

template <typename T>
Var<T> sigmoid(Var<T> x);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

/// Elementwise product, identical shapes.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);

template <typename T>
Var<T> scale(Var<T> x, T factor);

/// Repeats every pixel into a 2x2 block.
template <typename T>
Var<T> upsample_nearest2x(Var<T> x);

/// Sum of all elements as a scalar node.
template <typename T>
Var<T> sum(Var<T> x);

/// sum_i weights[i] * terms[i] for scalar terms.
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights);

/// 3x3 max filter, stride 1, padding value -inf. Not differentiable.
template <typename T>
Tensor<T> maxpool3x3(const Tensor<T>& x);

}  // namespace cornerdet
