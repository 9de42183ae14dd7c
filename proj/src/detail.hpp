#pragma once

#include <vector>

#include "cmt/tensor.hpp"

namespace cmt::detail {

/// The four clamped source taps and Catmull-Rom weights feeding one output
/// coordinate of an align-corners bicubic resize.
struct CubicTaps {
  Index index[4];
  double weight[4];
};

std::vector<CubicTaps> bicubic_taps(Index in, Index out);

}  // namespace cmt::detail
