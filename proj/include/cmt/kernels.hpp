#pragma once

#include "cmt/tensor.hpp"

namespace cmt {

inline constexpr double kDefaultEps = 1e-5;

/// Explicit per-side zero padding.
struct Padding {
  Index top = 0;
  Index bottom = 0;
  Index left = 0;
  Index right = 0;

  /// floor((k-1)/2) on the leading side, ceil((k-1)/2) on the trailing side.
  static Padding same(Index kh, Index kw) {
    return {(kh - 1) / 2, kh / 2, (kw - 1) / 2, kw / 2};
  }
  friend bool operator==(const Padding&, const Padding&) = default;
};

/// Convolution weights. Dense kernels are [kh, kw, c_in, c_out]; depthwise
/// kernels are [kh, kw, c] and output channel i reads input channel i only.
template <typename Scalar>
struct ConvWeights {
  Tensor<Scalar> kernel;
  Tensor<Scalar> bias;
  Index stride = 1;
  Padding padding;

  Index kh() const { return kernel.dim(0); }
  Index kw() const { return kernel.dim(1); }
};

/// y = x W + b with W stored [d_in, d_out].
template <typename Scalar>
struct Linear {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;

  Index in_features() const { return weight.dim(0); }
  Index out_features() const { return weight.dim(1); }
};

/// Affine pair of a layer normalization over the last axis.
template <typename Scalar>
struct LayerNormParams {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
};

/// Inference-form batch normalization over the channel (last) axis.
template <typename Scalar>
struct BatchNormParams {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
  Tensor<Scalar> running_mean;
  Tensor<Scalar> running_var;
};

/// floor((in + pad - k) / stride) + 1; throws ConfigError when < 1.
Index conv_output_extent(Index in, Index pad_lead, Index pad_trail, Index k, Index stride);

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

/// Applies a Linear over the last axis; leading extents are preserved.
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Linear<Scalar>& p);

/// Cross-correlation of [N,H,W,Cin] with a dense kernel, plus bias.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const ConvWeights<Scalar>& w);

template <typename Scalar>
Tensor<Scalar> dwconv2d(const Tensor<Scalar>& x, const ConvWeights<Scalar>& w);

/// Softmax along the last axis with max subtraction.
template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& x);

/// Exact erf-form GELU.
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const LayerNormParams<Scalar>& p,
                          double eps = kDefaultEps);

template <typename Scalar>
Tensor<Scalar> batch_norm_infer(const Tensor<Scalar>& x, const BatchNormParams<Scalar>& p,
                                double eps = kDefaultEps);

/// [N,H,W,C] -> [N,C].
template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x);

/// Separable Catmull-Rom (a = -0.5) resize of a [h,w] matrix with
/// align-corners sampling and clamp-to-edge taps.
template <typename Scalar>
Tensor<Scalar> bicubic_resize(const Tensor<Scalar>& m, Index out_h, Index out_w);

/// Catmull-Rom kernel weight at distance t.
double cubic_weight(double t);

}  // namespace cmt
