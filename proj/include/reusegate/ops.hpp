#pragma once

#include "reusegate/tensor.hpp"

#include <vector>

namespace reusegate {

enum class Pointwise { relu, sigmoid };

/// 2-D cross-correlation over an NCHW batch. `w` is (c_out, c_in, k, k),
/// `b` is (1, c_out, 1, 1) or undefined for no bias.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int stride = 1, int padding = 0,
                 int dilation = 1);

/// Output spatial extent of a convolution along one axis.
int conv_output_size(int in, int kernel, int stride, int padding, int dilation);

/// Gradient goes to the first maximal element of each window (row-major).
template <typename S>
Tensor<S> maxpool2d(const Tensor<S>& x, int k = 2, int stride = 2);

/// Non-overlapping k×k area average.
template <typename S>
Tensor<S> avgpool2d(const Tensor<S>& x, int k);

template <typename S>
Tensor<S> pointwise(const Tensor<S>& x, Pointwise kind);

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  return pointwise(x, Pointwise::relu);
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return pointwise(x, Pointwise::sigmoid);
}

/// Bilinear 2x upsampling with half-pixel centres; borders clamp.
template <typename S>
Tensor<S> upsample_bilinear2x(const Tensor<S>& x);

template <typename S>
Tensor<S> concat_channels(const std::vector<Tensor<S>>& xs);

template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x);

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);

template <typename S>
Tensor<S> abs(const Tensor<S>& x);

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S factor);

/// Elementwise max(x, floor); no gradient where x <= floor.
template <typename S>
Tensor<S> clamp_min(const Tensor<S>& x, S floor);

template <typename S>
Tensor<S> square(const Tensor<S>& x);

/// Sum of every element, as a 1×1×1×1 tensor.
template <typename S>
Tensor<S> sum(const Tensor<S>& x);

template <typename S>
Tensor<S> l2_mean(const Tensor<S>& a, const Tensor<S>& b);

/// Mean binary cross-entropy between logits and targets in [0, 1], in the
/// stable form max(z, 0) - z t + log(1 + exp(-|z|)).
template <typename S>
Tensor<S> bce_with_logits(const Tensor<S>& logits, const Tensor<S>& target);

}  // namespace reusegate
