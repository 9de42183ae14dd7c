#include "cmt/kernels.hpp"

#include <cmath>
#include <numbers>

#include "detail.hpp"

namespace cmt {

Index conv_output_extent(Index in, Index pad_lead, Index pad_trail, Index k, Index stride) {
  if (stride < 1) throw ConfigError("convolution stride must be positive");
  if (pad_lead < 0 || pad_trail < 0) throw ConfigError("convolution padding must be nonnegative");
  const Index span = in + pad_lead + pad_trail - k;
  if (span < 0) {
    throw ConfigError("kernel extent " + std::to_string(k) + " exceeds padded input extent " +
                      std::to_string(in + pad_lead + pad_trail));
  }
  return span / stride + 1;
}

double cubic_weight(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

namespace detail {

std::vector<CubicTaps> bicubic_taps(Index in, Index out) {
  std::vector<CubicTaps> taps(static_cast<std::size_t>(out));
  const double scale = out > 1 ? static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
  for (Index o = 0; o < out; ++o) {
    const double src = static_cast<double>(o) * scale;
    const double base = std::floor(src);
    const double t = src - base;
    auto& tap = taps[static_cast<std::size_t>(o)];
    for (int j = 0; j < 4; ++j) {
      const Index i = static_cast<Index>(base) - 1 + j;
      tap.index[j] = std::clamp<Index>(i, 0, in - 1);
      tap.weight[j] = cubic_weight(t - static_cast<double>(j - 1));
    }
  }
  return taps;
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + to_string(a.shape()) + " by " +
                         to_string(b.shape()));
  }
  Tensor<Scalar> out({a.dim(0), b.dim(1)});
  out.rows().noalias() = a.rows() * b.rows();
  return out;
}

template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Linear<Scalar>& p) {
  if (p.weight.rank() != 2 || x.dim(-1) != p.weight.dim(0)) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " vs weight " +
                         to_string(p.weight.shape()));
  }
  Shape shape = x.shape();
  shape.back() = p.weight.dim(1);
  Tensor<Scalar> out(shape);
  auto y = out.rows();
  y.noalias() = x.rows() * p.weight.rows();
  if (!p.bias.empty()) {
    if (p.bias.size() != y.cols()) {
      throw DimensionError("linear: bias " + to_string(p.bias.shape()) + " for width " +
                           std::to_string(y.cols()));
    }
    y.rowwise() += p.bias.matrix(1, y.cols()).row(0);
  }
  return out;
}

namespace {

template <typename Scalar>
void check_nhwc(const Tensor<Scalar>& x, const char* op) {
  if (x.rank() != 4) {
    throw DimensionError(std::string(op) + ": expected [N,H,W,C] input, got " + to_string(x.shape()));
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const ConvWeights<Scalar>& w) {
  check_nhwc(x, "conv2d");
  const auto& k = w.kernel;
  if (k.rank() != 4 || k.dim(2) != x.dim(3)) {
    throw DimensionError("conv2d: kernel " + to_string(k.shape()) + " for input " +
                         to_string(x.shape()));
  }
  const Index n = x.dim(0), h = x.dim(1), wd = x.dim(2), cin = x.dim(3);
  const Index kh = k.dim(0), kw = k.dim(1), cout = k.dim(3);
  if (!w.bias.empty() && w.bias.size() != cout) {
    throw DimensionError("conv2d: bias " + to_string(w.bias.shape()) + " for " +
                         std::to_string(cout) + " output channels");
  }
  const auto& pad = w.padding;
  const Index oh = conv_output_extent(h, pad.top, pad.bottom, kh, w.stride);
  const Index ow = conv_output_extent(wd, pad.left, pad.right, kw, w.stride);

  Tensor<Scalar> out({n, oh, ow, cout});
  const auto kernel = k.matrix(kh * kw * cin, cout);
  for (Index b = 0; b < n; ++b) {
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        MatrixMap<Scalar> acc(&out(b, oy, ox, 0), 1, cout);
        if (w.bias.empty()) {
          acc.setZero();
        } else {
          acc = w.bias.matrix(1, cout);
        }
        for (Index ky = 0; ky < kh; ++ky) {
          const Index iy = oy * w.stride - pad.top + ky;
          if (iy < 0 || iy >= h) continue;
          for (Index kx = 0; kx < kw; ++kx) {
            const Index ix = ox * w.stride - pad.left + kx;
            if (ix < 0 || ix >= wd) continue;
            ConstMatrixMap<Scalar> in(&x(b, iy, ix, 0), 1, cin);
            acc.noalias() += in * kernel.middleRows((ky * kw + kx) * cin, cin);
          }
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> dwconv2d(const Tensor<Scalar>& x, const ConvWeights<Scalar>& w) {
  check_nhwc(x, "dwconv2d");
  const auto& k = w.kernel;
  const Index c = x.dim(3);
  if (k.rank() != 3 || k.dim(2) != c) {
    throw DimensionError("dwconv2d: depthwise kernel " + to_string(k.shape()) + " for input " +
                         to_string(x.shape()) + " (kernel channels must equal input channels)");
  }
  if (!w.bias.empty() && w.bias.size() != c) {
    throw DimensionError("dwconv2d: bias " + to_string(w.bias.shape()) + " for " +
                         std::to_string(c) + " channels");
  }
  const Index n = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const Index kh = k.dim(0), kw = k.dim(1);
  const auto& pad = w.padding;
  const Index oh = conv_output_extent(h, pad.top, pad.bottom, kh, w.stride);
  const Index ow = conv_output_extent(wd, pad.left, pad.right, kw, w.stride);

  using Row = Eigen::Map<Eigen::Array<Scalar, 1, Eigen::Dynamic>>;
  using ConstRow = Eigen::Map<const Eigen::Array<Scalar, 1, Eigen::Dynamic>>;
  Tensor<Scalar> out({n, oh, ow, c});
  for (Index b = 0; b < n; ++b) {
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        Row acc(&out(b, oy, ox, 0), c);
        if (w.bias.empty()) {
          acc.setZero();
        } else {
          acc = ConstRow(w.bias.data(), c);
        }
        for (Index ky = 0; ky < kh; ++ky) {
          const Index iy = oy * w.stride - pad.top + ky;
          if (iy < 0 || iy >= h) continue;
          for (Index kx = 0; kx < kw; ++kx) {
            const Index ix = ox * w.stride - pad.left + kx;
            if (ix < 0 || ix >= wd) continue;
            acc += ConstRow(&x(b, iy, ix, 0), c) * ConstRow(&k(ky, kx, 0), c);
          }
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& x) {
  Tensor<Scalar> out(x.shape());
  auto in = x.rows();
  auto y = out.rows();
  for (Index r = 0; r < in.rows(); ++r) {
    const Scalar mx = in.row(r).maxCoeff();
    y.row(r) = (in.row(r).array() - mx).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  Tensor<Scalar> out(x.shape());
  const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
  for (Index i = 0; i < x.size(); ++i) {
    const Scalar v = x[i];
    out[i] = Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2));
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const LayerNormParams<Scalar>& p, double eps) {
  if (eps <= 0) throw ParameterError("layer_norm: eps must be positive");
  const Index d = x.dim(-1);
  if (p.gamma.size() != d || p.beta.size() != d) {
    throw DimensionError("layer_norm: affine params " + to_string(p.gamma.shape()) + "/" +
                         to_string(p.beta.shape()) + " for last axis " + std::to_string(d));
  }
  Tensor<Scalar> out(x.shape());
  auto in = x.rows();
  auto y = out.rows();
  const auto gamma = p.gamma.array().transpose();
  const auto beta = p.beta.array().transpose();
  for (Index r = 0; r < in.rows(); ++r) {
    const auto row = in.row(r).array();
    const Scalar mean = row.mean();
    const Scalar var = (row - mean).square().mean();
    const Scalar rstd = Scalar(1) / std::sqrt(var + static_cast<Scalar>(eps));
    y.row(r) = ((row - mean) * rstd * gamma + beta).matrix();
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> batch_norm_infer(const Tensor<Scalar>& x, const BatchNormParams<Scalar>& p,
                                double eps) {
  if (eps <= 0) throw ParameterError("batch_norm_infer: eps must be positive");
  const Index c = x.dim(-1);
  for (const auto* t : {&p.gamma, &p.beta, &p.running_mean, &p.running_var}) {
    if (t->size() != c) {
      throw DimensionError("batch_norm_infer: parameter " + to_string(t->shape()) + " for " +
                           std::to_string(c) + " channels");
    }
  }
  if ((p.running_var.array() < Scalar(0)).any()) {
    throw ParameterError("batch_norm_infer: running variance must be nonnegative");
  }
  const Eigen::Array<Scalar, 1, Eigen::Dynamic> scale =
      p.gamma.array().transpose() /
      (p.running_var.array().transpose() + static_cast<Scalar>(eps)).sqrt();
  const Eigen::Array<Scalar, 1, Eigen::Dynamic> shift =
      p.beta.array().transpose() - p.running_mean.array().transpose() * scale;
  Tensor<Scalar> out(x.shape());
  auto in = x.rows();
  auto y = out.rows();
  for (Index r = 0; r < in.rows(); ++r) y.row(r) = (in.row(r).array() * scale + shift).matrix();
  return out;
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x) {
  check_nhwc(x, "global_avg_pool");
  const Index n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
  Tensor<Scalar> out({n, c});
  for (Index b = 0; b < n; ++b) {
    ConstMatrixMap<Scalar> plane(&x(b, 0, 0, 0), hw, c);
    out.matrix(n, c).row(b) = plane.colwise().mean();
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> bicubic_resize(const Tensor<Scalar>& m, Index out_h, Index out_w) {
  if (m.rank() != 2) throw DimensionError("bicubic_resize: expected [h,w], got " + to_string(m.shape()));
  if (out_h < 1 || out_w < 1) throw DimensionError("bicubic_resize: target extents must be >= 1");
  const Index h = m.dim(0), w = m.dim(1);
  const auto taps_w = detail::bicubic_taps(w, out_w);
  const auto taps_h = detail::bicubic_taps(h, out_h);

  // Columns first (w -> out_w), then rows (h -> out_h); accumulate in double.
  std::vector<double> tmp(static_cast<std::size_t>(h * out_w));
  for (Index r = 0; r < h; ++r) {
    for (Index c = 0; c < out_w; ++c) {
      const auto& t = taps_w[static_cast<std::size_t>(c)];
      double acc = 0.0;
      for (int j = 0; j < 4; ++j) acc += t.weight[j] * static_cast<double>(m(r, t.index[j]));
      tmp[static_cast<std::size_t>(r * out_w + c)] = acc;
    }
  }
  Tensor<Scalar> out({out_h, out_w});
  for (Index r = 0; r < out_h; ++r) {
    const auto& t = taps_h[static_cast<std::size_t>(r)];
    for (Index c = 0; c < out_w; ++c) {
      double acc = 0.0;
      for (int j = 0; j < 4; ++j) acc += t.weight[j] * tmp[static_cast<std::size_t>(t.index[j] * out_w + c)];
      out(r, c) = static_cast<Scalar>(acc);
    }
  }
  return out;
}

#define CMT_INSTANTIATE_KERNELS(S)                                                        \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                          \
  template Tensor<S> linear(const Tensor<S>&, const Linear<S>&);                          \
  template Tensor<S> conv2d(const Tensor<S>&, const ConvWeights<S>&);                     \
  template Tensor<S> dwconv2d(const Tensor<S>&, const ConvWeights<S>&);                   \
  template Tensor<S> softmax_rows(const Tensor<S>&);                                      \
  template Tensor<S> gelu(const Tensor<S>&);                                              \
  template Tensor<S> layer_norm(const Tensor<S>&, const LayerNormParams<S>&, double);     \
  template Tensor<S> batch_norm_infer(const Tensor<S>&, const BatchNormParams<S>&, double); \
  template Tensor<S> global_avg_pool(const Tensor<S>&);                                   \
  template Tensor<S> bicubic_resize(const Tensor<S>&, Index, Index);

CMT_INSTANTIATE_KERNELS(float)
CMT_INSTANTIATE_KERNELS(double)

}  // namespace cmt
