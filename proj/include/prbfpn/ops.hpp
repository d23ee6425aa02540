// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operators. Each one computes its output eagerly and, when a
// tape is active and an input requires a gradient, records its backward rule.
// Filters are (c_out, c_in, k, k) tensors; per-channel vectors (biases,
// depthwise scales) are (1, c, 1, 1) tensors.
#pragma once

#include <span>
#include <vector>

#include "prbfpn/tensor.hpp"

namespace prbfpn {

/// Cross-correlation with square odd kernels, zero padding and uniform stride.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int pad);

/// Per-pixel linear map across channels; weight is (c_out, c_in, 1, 1).
template <typename T>
Tensor<T> pointwise_conv(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

/// y[:, i] = weight[i] * x[:, i] + bias[i]
template <typename T>
Tensor<T> depthwise_scale(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

/// Moves each block x block patch into block^2 consecutive channels
/// (row-major sub-pixel order), so (n, c, h, w) -> (n, c*b*b, h/b, w/b).
template <typename T>
Tensor<T> space_to_depth(const Tensor<T>& input, int block = 2);

/// Nearest-neighbour 2x upsampling.
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& input);

/// 2x2 max pooling with stride 2. Ties resolve to the first element in
/// row-major order within the window.
template <typename T>
Tensor<T> downsample2x(const Tensor<T>& input);

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> inputs);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& input, T slope = T(0.1));

/// Sum of all elements as a 1x1x1x1 tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& input);

namespace debug {
// When set, conv2d scales its weight gradient by 2. Exists so the gradient
// checker's failure path can be exercised end to end.
void set_backward_fault(bool enabled);
bool backward_fault();
}  // namespace debug

}  // namespace prbfpn
