#pragma once

#include "tensor.hpp"

namespace xs {

enum class WarpDirection {
  // output(x, y) = source(x - d(x, y), y): rebuild the left view from the right.
  left_from_right,
  // output(x, y) = source(x + d(x, y), y): rebuild the right view from the left.
  right_from_left,
};

template <typename T>
struct WarpResult {
  Tensor<T> warped;
  // 1 where the sampling coordinate lies in [0, W-1], else 0. Never differentiable.
  Tensor<T> valid_mask;
};

/// Horizontal warp with linear interpolation between the two neighbouring
/// columns. Differentiable w.r.t. source and disparity; pixels sampled out of
/// bounds are zero and receive no gradient.
template <typename T>
WarpResult<T> warp_horizontal(const Tensor<T>& source, const Tensor<T>& disparity,
                              WarpDirection direction);

/// sum(values * mask) / max(1, sum(mask)). A 1-channel mask is broadcast over
/// the channels of values (and counted once per channel).
template <typename T>
Tensor<T> masked_mean(const Tensor<T>& values, const Tensor<T>& mask);

}  // namespace xs
