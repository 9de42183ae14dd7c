#include "cmt/tensor.hpp"

#include <sstream>

namespace cmt {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<Index> inverse_permutation(const std::vector<Index>& axes) {
  std::vector<Index> inv(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) inv[static_cast<std::size_t>(axes[i])] = static_cast<Index>(i);
  return inv;
}

template <typename Scalar>
Tensor<Scalar> permute(const Tensor<Scalar>& x, const std::vector<Index>& axes) {
  const auto rank = static_cast<std::size_t>(x.rank());
  if (axes.size() != rank) {
    throw DimensionError("permute: " + std::to_string(axes.size()) + " axes for tensor " +
                         to_string(x.shape()));
  }
  std::vector<bool> seen(rank, false);
  for (Index a : axes) {
    if (a < 0 || a >= x.rank() || seen[static_cast<std::size_t>(a)]) {
      throw DimensionError("permute: axes are not a permutation of 0.." + std::to_string(rank - 1));
    }
    seen[static_cast<std::size_t>(a)] = true;
  }

  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.shape()[static_cast<std::size_t>(axes[i])];

  // Input strides reordered to the output axis order.
  std::vector<Index> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.shape()[i];
  std::vector<Index> stride(rank);
  for (std::size_t i = 0; i < rank; ++i) stride[i] = in_stride[static_cast<std::size_t>(axes[i])];

  Tensor<Scalar> out(out_shape);
  std::vector<Index> idx(rank, 0);
  Index src = 0;
  for (Index o = 0; o < out.size(); ++o) {
    out[o] = x[src];
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      src += stride[d];
      if (idx[d] < out_shape[d]) break;
      src -= stride[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  return out;
}

template Tensor<float> permute(const Tensor<float>&, const std::vector<Index>&);
template Tensor<double> permute(const Tensor<double>&, const std::vector<Index>&);

}  // namespace cmt
