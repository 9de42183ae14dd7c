#include "cmt/grad.hpp"

#include <cmath>
#include <numbers>

#include "detail.hpp"

namespace cmt {

namespace {

template <typename Scalar>
Tensor<Scalar> zeros_like(const Tensor<Scalar>& t) {
  return t.empty() ? Tensor<Scalar>() : Tensor<Scalar>(t.shape());
}

template <typename Scalar>
void require_same(const Tensor<Scalar>& g, const Shape& expected, const char* op) {
  if (g.shape() != expected) {
    throw DimensionError(std::string(op) + " vjp: cotangent " + to_string(g.shape()) +
                         " does not match output " + to_string(expected));
  }
}

template <typename Scalar>
Tensor<Scalar> column_sums(const Tensor<Scalar>& g) {
  Tensor<Scalar> out({g.dim(-1)});
  out.matrix(1, g.dim(-1)) = g.rows().colwise().sum();
  return out;
}

}  // namespace

template <typename Scalar>
MatmulVjp<Scalar> matmul_vjp(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const Tensor<Scalar>& g) {
  require_same(g, {a.dim(0), b.dim(1)}, "matmul");
  MatmulVjp<Scalar> out{Tensor<Scalar>(a.shape()), Tensor<Scalar>(b.shape())};
  out.a.rows().noalias() = g.rows() * b.rows().transpose();
  out.b.rows().noalias() = a.rows().transpose() * g.rows();
  return out;
}

template <typename Scalar>
ParamVjp<Scalar, Linear<Scalar>> linear_vjp(const Tensor<Scalar>& x, const Linear<Scalar>& p,
                                            const Tensor<Scalar>& g) {
  Shape out_shape = x.shape();
  out_shape.back() = p.out_features();
  require_same(g, out_shape, "linear");
  ParamVjp<Scalar, Linear<Scalar>> out;
  out.input = Tensor<Scalar>(x.shape());
  out.input.rows().noalias() = g.rows() * p.weight.rows().transpose();
  out.params.weight = Tensor<Scalar>(p.weight.shape());
  out.params.weight.rows().noalias() = x.rows().transpose() * g.rows();
  if (!p.bias.empty()) out.params.bias = column_sums(g);
  return out;
}

template <typename Scalar>
ParamVjp<Scalar, ConvWeights<Scalar>> conv2d_vjp(const Tensor<Scalar>& x, const ConvWeights<Scalar>& w,
                                                 const Tensor<Scalar>& g) {
  const auto& k = w.kernel;
  const Index n = x.dim(0), h = x.dim(1), wd = x.dim(2), cin = x.dim(3);
  const Index kh = k.dim(0), kw = k.dim(1), cout = k.dim(3);
  const auto& pad = w.padding;
  const Index oh = conv_output_extent(h, pad.top, pad.bottom, kh, w.stride);
  const Index ow = conv_output_extent(wd, pad.left, pad.right, kw, w.stride);
  require_same(g, {n, oh, ow, cout}, "conv2d");

  ParamVjp<Scalar, ConvWeights<Scalar>> out;
  out.input = Tensor<Scalar>(x.shape());
  out.params = w;
  out.params.kernel = Tensor<Scalar>(k.shape());
  out.params.bias = zeros_like(w.bias);
  const auto kernel = k.matrix(kh * kw * cin, cout);
  auto dkernel = out.params.kernel.matrix(kh * kw * cin, cout);
  for (Index b = 0; b < n; ++b) {
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        ConstMatrixMap<Scalar> go(&g(b, oy, ox, 0), 1, cout);
        for (Index ky = 0; ky < kh; ++ky) {
          const Index iy = oy * w.stride - pad.top + ky;
          if (iy < 0 || iy >= h) continue;
          for (Index kx = 0; kx < kw; ++kx) {
            const Index ix = ox * w.stride - pad.left + kx;
            if (ix < 0 || ix >= wd) continue;
            const Index row = (ky * kw + kx) * cin;
            ConstMatrixMap<Scalar> in(&x(b, iy, ix, 0), 1, cin);
            MatrixMap<Scalar> din(&out.input(b, iy, ix, 0), 1, cin);
            dkernel.middleRows(row, cin).noalias() += in.transpose() * go;
            din.noalias() += go * kernel.middleRows(row, cin).transpose();
          }
        }
      }
    }
  }
  if (!w.bias.empty()) out.params.bias = column_sums(g);
  return out;
}

template <typename Scalar>
ParamVjp<Scalar, ConvWeights<Scalar>> dwconv2d_vjp(const Tensor<Scalar>& x,
                                                   const ConvWeights<Scalar>& w,
                                                   const Tensor<Scalar>& g) {
  const auto& k = w.kernel;
  const Index n = x.dim(0), h = x.dim(1), wd = x.dim(2), c = x.dim(3);
  const Index kh = k.dim(0), kw = k.dim(1);
  const auto& pad = w.padding;
  const Index oh = conv_output_extent(h, pad.top, pad.bottom, kh, w.stride);
  const Index ow = conv_output_extent(wd, pad.left, pad.right, kw, w.stride);
  require_same(g, {n, oh, ow, c}, "dwconv2d");

  using Row = Eigen::Map<Eigen::Array<Scalar, 1, Eigen::Dynamic>>;
  using ConstRow = Eigen::Map<const Eigen::Array<Scalar, 1, Eigen::Dynamic>>;
  ParamVjp<Scalar, ConvWeights<Scalar>> out;
  out.input = Tensor<Scalar>(x.shape());
  out.params = w;
  out.params.kernel = Tensor<Scalar>(k.shape());
  out.params.bias = zeros_like(w.bias);
  for (Index b = 0; b < n; ++b) {
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        ConstRow go(&g(b, oy, ox, 0), c);
        for (Index ky = 0; ky < kh; ++ky) {
          const Index iy = oy * w.stride - pad.top + ky;
          if (iy < 0 || iy >= h) continue;
          for (Index kx = 0; kx < kw; ++kx) {
            const Index ix = ox * w.stride - pad.left + kx;
            if (ix < 0 || ix >= wd) continue;
            Row(&out.params.kernel(ky, kx, 0), c) += ConstRow(&x(b, iy, ix, 0), c) * go;
            Row(&out.input(b, iy, ix, 0), c) += ConstRow(&k(ky, kx, 0), c) * go;
          }
        }
      }
    }
  }
  if (!w.bias.empty()) out.params.bias = column_sums(g);
  return out;
}

template <typename Scalar>
Tensor<Scalar> softmax_rows_vjp(const Tensor<Scalar>& y, const Tensor<Scalar>& g) {
  require_same(g, y.shape(), "softmax_rows");
  Tensor<Scalar> out(y.shape());
  auto yr = y.rows();
  auto gr = g.rows();
  auto dx = out.rows();
  for (Index r = 0; r < yr.rows(); ++r) {
    const Scalar dot = yr.row(r).dot(gr.row(r));
    dx.row(r) = (yr.row(r).array() * (gr.row(r).array() - dot)).matrix();
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> gelu_vjp(const Tensor<Scalar>& x, const Tensor<Scalar>& g) {
  require_same(g, x.shape(), "gelu");
  Tensor<Scalar> out(x.shape());
  const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
  const Scalar inv_sqrt2pi = Scalar(1) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
  for (Index i = 0; i < x.size(); ++i) {
    const Scalar v = x[i];
    const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2));
    const Scalar pdf = inv_sqrt2pi * std::exp(Scalar(-0.5) * v * v);
    out[i] = g[i] * (cdf + v * pdf);
  }
  return out;
}

template <typename Scalar>
ParamVjp<Scalar, LayerNormParams<Scalar>> layer_norm_vjp(const Tensor<Scalar>& x,
                                                         const LayerNormParams<Scalar>& p,
                                                         const Tensor<Scalar>& g, double eps) {
  require_same(g, x.shape(), "layer_norm");
  const Index d = x.dim(-1);
  ParamVjp<Scalar, LayerNormParams<Scalar>> out;
  out.input = Tensor<Scalar>(x.shape());
  out.params.gamma = Tensor<Scalar>({d});
  out.params.beta = Tensor<Scalar>({d});
  auto in = x.rows();
  auto gr = g.rows();
  auto dx = out.input.rows();
  auto dgamma = out.params.gamma.array();
  auto dbeta = out.params.beta.array();
  const auto gamma = p.gamma.array();
  Eigen::Array<Scalar, Eigen::Dynamic, 1> xhat(d), dxhat(d);
  for (Index r = 0; r < in.rows(); ++r) {
    const auto row = in.row(r).array().transpose();
    const Scalar mean = row.mean();
    const Scalar var = (row - mean).square().mean();
    const Scalar rstd = Scalar(1) / std::sqrt(var + static_cast<Scalar>(eps));
    xhat = (row - mean) * rstd;
    const auto go = gr.row(r).array().transpose();
    dgamma += go * xhat;
    dbeta += go;
    dxhat = go * gamma;
    dx.row(r) = (rstd * (dxhat - dxhat.mean() - xhat * (dxhat * xhat).mean())).matrix().transpose();
  }
  return out;
}

template <typename Scalar>
ParamVjp<Scalar, BatchNormParams<Scalar>> batch_norm_infer_vjp(const Tensor<Scalar>& x,
                                                               const BatchNormParams<Scalar>& p,
                                                               const Tensor<Scalar>& g, double eps) {
  require_same(g, x.shape(), "batch_norm_infer");
  const Index c = x.dim(-1);
  const Eigen::Array<Scalar, 1, Eigen::Dynamic> inv_std =
      (p.running_var.array().transpose() + static_cast<Scalar>(eps)).sqrt().inverse();
  const Eigen::Array<Scalar, 1, Eigen::Dynamic> scale = p.gamma.array().transpose() * inv_std;
  const Eigen::Array<Scalar, 1, Eigen::Dynamic> mean = p.running_mean.array().transpose();

  ParamVjp<Scalar, BatchNormParams<Scalar>> out;
  out.input = Tensor<Scalar>(x.shape());
  out.params.gamma = Tensor<Scalar>({c});
  out.params.beta = Tensor<Scalar>({c});
  out.params.running_mean = Tensor<Scalar>({c});
  out.params.running_var = Tensor<Scalar>({c});
  auto in = x.rows();
  auto gr = g.rows();
  auto dx = out.input.rows();
  Eigen::Array<Scalar, 1, Eigen::Dynamic> dgamma = Eigen::Array<Scalar, 1, Eigen::Dynamic>::Zero(c);
  for (Index r = 0; r < in.rows(); ++r) {
    dx.row(r) = (gr.row(r).array() * scale).matrix();
    dgamma += gr.row(r).array() * (in.row(r).array() - mean) * inv_std;
  }
  out.params.gamma.array() = dgamma.transpose();
  out.params.beta = column_sums(g);
  return out;
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool_vjp(const Shape& input_shape, const Tensor<Scalar>& g) {
  if (input_shape.size() != 4) throw DimensionError("global_avg_pool vjp: expected [N,H,W,C] input");
  const Index n = input_shape[0], hw = input_shape[1] * input_shape[2], c = input_shape[3];
  require_same(g, {n, c}, "global_avg_pool");
  Tensor<Scalar> out(input_shape);
  const Scalar inv = Scalar(1) / static_cast<Scalar>(hw);
  for (Index b = 0; b < n; ++b) {
    MatrixMap<Scalar> plane(&out(b, 0, 0, 0), hw, c);
    plane.rowwise() = g.matrix(n, c).row(b) * inv;
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> bicubic_resize_vjp(const Shape& input_shape, const Tensor<Scalar>& g) {
  if (input_shape.size() != 2 || g.rank() != 2) {
    throw DimensionError("bicubic_resize vjp: expected matrices");
  }
  const Index h = input_shape[0], w = input_shape[1];
  const Index out_h = g.dim(0), out_w = g.dim(1);
  const auto taps_w = detail::bicubic_taps(w, out_w);
  const auto taps_h = detail::bicubic_taps(h, out_h);
  // Forward is rows(cols(M)); the transpose undoes rows first.
  std::vector<double> tmp(static_cast<std::size_t>(h * out_w), 0.0);
  for (Index r = 0; r < out_h; ++r) {
    const auto& t = taps_h[static_cast<std::size_t>(r)];
    for (Index c = 0; c < out_w; ++c) {
      const double v = static_cast<double>(g(r, c));
      for (int j = 0; j < 4; ++j) tmp[static_cast<std::size_t>(t.index[j] * out_w + c)] += t.weight[j] * v;
    }
  }
  std::vector<double> acc(static_cast<std::size_t>(h * w), 0.0);
  for (Index r = 0; r < h; ++r) {
    for (Index c = 0; c < out_w; ++c) {
      const auto& t = taps_w[static_cast<std::size_t>(c)];
      const double v = tmp[static_cast<std::size_t>(r * out_w + c)];
      for (int j = 0; j < 4; ++j) acc[static_cast<std::size_t>(r * w + t.index[j])] += t.weight[j] * v;
    }
  }
  Tensor<Scalar> out(input_shape);
  for (Index i = 0; i < out.size(); ++i) out[i] = static_cast<Scalar>(acc[static_cast<std::size_t>(i)]);
  return out;
}

template <typename Scalar>
Tensor<Scalar> permute_vjp(const std::vector<Index>& axes, const Tensor<Scalar>& g) {
  return permute(g, inverse_permutation(axes));
}

template <typename Scalar>
AttentionVjp<Scalar> attention_baseline_vjp(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                                            const Tensor<Scalar>& v, const Tensor<Scalar>& g) {
  require_same(g, {q.dim(0), v.dim(1)}, "attention");
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(q.dim(1)));
  Tensor<Scalar> logits({q.dim(0), k.dim(0)});
  logits.rows().noalias() = (q.rows() * k.rows().transpose()) * scale;
  const Tensor<Scalar> weights = softmax_rows(logits);

  AttentionVjp<Scalar> out{Tensor<Scalar>(q.shape()), Tensor<Scalar>(k.shape()), Tensor<Scalar>(v.shape())};
  out.v.rows().noalias() = weights.rows().transpose() * g.rows();
  Tensor<Scalar> dweights(weights.shape());
  dweights.rows().noalias() = g.rows() * v.rows().transpose();
  const Tensor<Scalar> dlogits = softmax_rows_vjp(weights, dweights);
  out.q.rows().noalias() = (dlogits.rows() * k.rows()) * scale;
  out.k.rows().noalias() = (dlogits.rows().transpose() * q.rows()) * scale;
  return out;
}

template <typename Scalar>
ParamVjp<Scalar, ConvWeights<Scalar>> reduce_tokens_vjp(const Tensor<Scalar>& x,
                                                        const ConvWeights<Scalar>& w, Index k,
                                                        const Tensor<Scalar>& g) {
  ConvWeights<Scalar> reduce = w;
  reduce.stride = k;
  reduce.padding = {0, reduced_extent(x.dim(1), k) * k - x.dim(1), 0,
                    reduced_extent(x.dim(2), k) * k - x.dim(2)};
  auto out = dwconv2d_vjp(x, reduce, g);
  out.params.stride = w.stride;
  out.params.padding = w.padding;
  return out;
}

template <typename Scalar>
ParamVjp<Scalar, LPUParams<Scalar>> lpu_vjp(const LPUParams<Scalar>& p, const Tensor<Scalar>& x,
                                            const Tensor<Scalar>& g) {
  ParamVjp<Scalar, LPUParams<Scalar>> out;
  out.params.shortcut = p.shortcut;
  if (p.dw.kernel.empty()) {
    out.input = g;
    return out;
  }
  auto conv = dwconv2d_vjp(x, p.dw, g);
  out.input = std::move(conv.input);
  if (p.shortcut) out.input += g;
  out.params.dw = std::move(conv.params);
  return out;
}

template <typename Scalar>
BiasedVjp<Scalar, LMHSAParams<Scalar>> lmhsa_vjp(const LMHSAParams<Scalar>& p,
                                                 const Tensor<Scalar>& rel_bias,
                                                 const Tensor<Scalar>& x, const Tensor<Scalar>& g) {
  const Index batch = x.dim(0), d = x.dim(3), heads = p.heads, kr = p.reduction;
  const Index dh = d / heads;
  const Index n = x.dim(1) * x.dim(2);
  const Index m = reduced_extent(x.dim(1), kr) * reduced_extent(x.dim(2), kr);
  if (!rel_bias.empty() && rel_bias.shape() != Shape{heads, n, m}) {
    throw ResolutionMismatch("lmhsa vjp: relative bias " + to_string(rel_bias.shape()) +
                             " does not match input " + to_string(x.shape()));
  }
  require_same(g, x.shape(), "lmhsa");

  // Forward, keeping what the backward pass reads.
  const Tensor<Scalar> xk = kr > 1 ? reduce_tokens(x, p.dw_k, kr) : x;
  const Tensor<Scalar> xv = kr > 1 ? reduce_tokens(x, p.dw_v, kr) : x;
  const Tensor<Scalar> q = linear(x, p.q);
  const Tensor<Scalar> keys = linear(xk, p.k);
  const Tensor<Scalar> values = linear(xv, p.v);
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  Tensor<Scalar> concat(x.shape());
  std::vector<RowMatrix<Scalar>> weights(static_cast<std::size_t>(batch * heads));
  for (Index b = 0; b < batch; ++b) {
    ConstMatrixMap<Scalar> qb(q.data() + b * n * d, n, d);
    ConstMatrixMap<Scalar> kb(keys.data() + b * m * d, m, d);
    ConstMatrixMap<Scalar> vb(values.data() + b * m * d, m, d);
    MatrixMap<Scalar> ob(concat.data() + b * n * d, n, d);
    for (Index j = 0; j < heads; ++j) {
      RowMatrix<Scalar>& a = weights[static_cast<std::size_t>(b * heads + j)];
      a = (qb.middleCols(j * dh, dh) * kb.middleCols(j * dh, dh).transpose()) * scale;
      if (!rel_bias.empty()) a += ConstMatrixMap<Scalar>(&rel_bias(j, 0, 0), n, m);
      for (Index r = 0; r < n; ++r) {
        a.row(r).array() = (a.row(r).array() - a.row(r).maxCoeff()).exp();
        a.row(r) /= a.row(r).sum();
      }
      ob.middleCols(j * dh, dh).noalias() = a * vb.middleCols(j * dh, dh);
    }
  }

  BiasedVjp<Scalar, LMHSAParams<Scalar>> out;
  out.params.heads = p.heads;
  out.params.reduction = p.reduction;
  auto o = linear_vjp(concat, p.o, g);
  out.params.o = std::move(o.params);
  if (!rel_bias.empty()) out.rel_bias = Tensor<Scalar>(rel_bias.shape());

  Tensor<Scalar> dq(q.shape()), dk(keys.shape()), dv(values.shape());
  RowMatrix<Scalar> dlogits(n, m);
  for (Index b = 0; b < batch; ++b) {
    ConstMatrixMap<Scalar> qb(q.data() + b * n * d, n, d);
    ConstMatrixMap<Scalar> kb(keys.data() + b * m * d, m, d);
    ConstMatrixMap<Scalar> vb(values.data() + b * m * d, m, d);
    ConstMatrixMap<Scalar> gb(o.input.data() + b * n * d, n, d);
    MatrixMap<Scalar> dqb(dq.data() + b * n * d, n, d);
    MatrixMap<Scalar> dkb(dk.data() + b * m * d, m, d);
    MatrixMap<Scalar> dvb(dv.data() + b * m * d, m, d);
    for (Index j = 0; j < heads; ++j) {
      const RowMatrix<Scalar>& a = weights[static_cast<std::size_t>(b * heads + j)];
      const auto gh = gb.middleCols(j * dh, dh);
      dvb.middleCols(j * dh, dh).noalias() = a.transpose() * gh;
      dlogits.noalias() = gh * vb.middleCols(j * dh, dh).transpose();
      for (Index r = 0; r < n; ++r) {
        const Scalar dot = a.row(r).dot(dlogits.row(r));
        dlogits.row(r).array() = a.row(r).array() * (dlogits.row(r).array() - dot);
      }
      if (!rel_bias.empty()) MatrixMap<Scalar>(&out.rel_bias(j, 0, 0), n, m) += dlogits;
      dqb.middleCols(j * dh, dh).noalias() = (dlogits * kb.middleCols(j * dh, dh)) * scale;
      dkb.middleCols(j * dh, dh).noalias() = (dlogits.transpose() * qb.middleCols(j * dh, dh)) * scale;
    }
  }

  auto gq = linear_vjp(x, p.q, dq);
  auto gk = linear_vjp(xk, p.k, dk);
  auto gv = linear_vjp(xv, p.v, dv);
  out.params.q = std::move(gq.params);
  out.params.k = std::move(gk.params);
  out.params.v = std::move(gv.params);
  out.input = std::move(gq.input);
  if (kr > 1) {
    auto rk = reduce_tokens_vjp(x, p.dw_k, kr, gk.input);
    auto rv = reduce_tokens_vjp(x, p.dw_v, kr, gv.input);
    out.input += rk.input;
    out.input += rv.input;
    out.params.dw_k = std::move(rk.params);
    out.params.dw_v = std::move(rv.params);
  } else {
    out.input += gk.input;
    out.input += gv.input;
  }
  return out;
}

template <typename Scalar>
ParamVjp<Scalar, FFNParams<Scalar>> ffn_baseline_vjp(const FFNParams<Scalar>& p,
                                                     const Tensor<Scalar>& x,
                                                     const Tensor<Scalar>& g) {
  const Tensor<Scalar> a = linear(x, p.fc1);
  const Tensor<Scalar> h = gelu(a);
  auto l2 = linear_vjp(h, p.fc2, g);
  auto l1 = linear_vjp(x, p.fc1, gelu_vjp(a, l2.input));
  return {std::move(l1.input), {std::move(l1.params), std::move(l2.params)}};
}

template <typename Scalar>
ParamVjp<Scalar, IRFFNParams<Scalar>> irffn_vjp(const IRFFNParams<Scalar>& p, const Tensor<Scalar>& x,
                                                const Tensor<Scalar>& g, double eps) {
  const Tensor<Scalar> a = linear(x, p.expand);
  const Tensor<Scalar> act1 = gelu(a);
  const Tensor<Scalar> hidden = batch_norm_infer(act1, p.bn1, eps);
  Tensor<Scalar> local = dwconv2d(hidden, p.dw);
  if (p.shortcut) local += hidden;
  const Tensor<Scalar> act2 = gelu(local);
  const Tensor<Scalar> e = batch_norm_infer(act2, p.bn2, eps);
  const Tensor<Scalar> f = linear(e, p.project);

  ParamVjp<Scalar, IRFFNParams<Scalar>> out;
  out.params.shortcut = p.shortcut;
  auto b3 = batch_norm_infer_vjp(f, p.bn3, g, eps);
  auto proj = linear_vjp(e, p.project, b3.input);
  auto b2 = batch_norm_infer_vjp(act2, p.bn2, proj.input, eps);
  const Tensor<Scalar> dlocal = gelu_vjp(local, b2.input);
  auto dw = dwconv2d_vjp(hidden, p.dw, dlocal);
  Tensor<Scalar> dhidden = std::move(dw.input);
  if (p.shortcut) dhidden += dlocal;
  auto b1 = batch_norm_infer_vjp(act1, p.bn1, dhidden, eps);
  auto exp = linear_vjp(x, p.expand, gelu_vjp(a, b1.input));

  out.input = std::move(exp.input);
  out.params.expand = std::move(exp.params);
  out.params.bn1 = std::move(b1.params);
  out.params.dw = std::move(dw.params);
  out.params.bn2 = std::move(b2.params);
  out.params.project = std::move(proj.params);
  out.params.bn3 = std::move(b3.params);
  return out;
}

template <typename Scalar>
BiasedVjp<Scalar, CMTBlockParams<Scalar>> cmt_block_vjp(const CMTBlockParams<Scalar>& p,
                                                        const Tensor<Scalar>& rel_bias,
                                                        const Tensor<Scalar>& x,
                                                        const Tensor<Scalar>& g, double eps) {
  const Tensor<Scalar> x1 = lpu_forward(p.lpu, x);
  const Tensor<Scalar> n1 = layer_norm(x1, p.ln1, eps);
  const Tensor<Scalar> x2 = lmhsa_forward(p.attn, rel_bias, n1) + x1;
  const Tensor<Scalar> n2 = layer_norm(x2, p.ln2, eps);

  BiasedVjp<Scalar, CMTBlockParams<Scalar>> out;
  auto ffn = irffn_vjp(p.ffn, n2, g, eps);
  auto ln2 = layer_norm_vjp(x2, p.ln2, ffn.input, eps);
  Tensor<Scalar> dx2 = g + ln2.input;
  auto attn = lmhsa_vjp(p.attn, rel_bias, n1, dx2);
  auto ln1 = layer_norm_vjp(x1, p.ln1, attn.input, eps);
  Tensor<Scalar> dx1 = dx2 + ln1.input;
  auto lpu = lpu_vjp(p.lpu, x, dx1);

  out.input = std::move(lpu.input);
  out.params.lpu = std::move(lpu.params);
  out.params.ln1 = std::move(ln1.params);
  out.params.attn = std::move(attn.params);
  out.params.ln2 = std::move(ln2.params);
  out.params.ffn = std::move(ffn.params);
  out.rel_bias = std::move(attn.rel_bias);
  return out;
}

template <typename Scalar>
ParamVjp<Scalar, StemParams<Scalar>> stem_vjp(const StemParams<Scalar>& p, const Tensor<Scalar>& x,
                                              const Tensor<Scalar>& g, double eps) {
  std::array<Tensor<Scalar>, 3> inputs, convs, norms;
  Tensor<Scalar> y = x;
  for (int i = 0; i < 3; ++i) {
    inputs[i] = y;
    convs[i] = conv2d(y, p.conv[i]);
    norms[i] = batch_norm_infer(convs[i], p.bn[i], eps);
    y = gelu(norms[i]);
  }
  ParamVjp<Scalar, StemParams<Scalar>> out;
  Tensor<Scalar> grad = g;
  for (int i = 2; i >= 0; --i) {
    auto bn = batch_norm_infer_vjp(convs[i], p.bn[i], gelu_vjp(norms[i], grad), eps);
    auto conv = conv2d_vjp(inputs[i], p.conv[i], bn.input);
    out.params.bn[i] = std::move(bn.params);
    out.params.conv[i] = std::move(conv.params);
    grad = std::move(conv.input);
  }
  out.input = std::move(grad);
  return out;
}

template <typename Scalar>
ParamVjp<Scalar, PatchAggParams<Scalar>> patch_agg_vjp(const PatchAggParams<Scalar>& p,
                                                       const Tensor<Scalar>& x,
                                                       const Tensor<Scalar>& g, double eps) {
  const Tensor<Scalar> c = conv2d(x, p.conv);
  auto ln = layer_norm_vjp(c, p.ln, g, eps);
  auto conv = conv2d_vjp(x, p.conv, ln.input);
  return {std::move(conv.input), {std::move(conv.params), std::move(ln.params)}};
}

template <typename Scalar>
ModelVjp<Scalar> model_vjp(const ModelT<Scalar>& model, const Tensor<Scalar>& x,
                           const std::function<Tensor<Scalar>(const Tensor<Scalar>&)>& cotangent) {
  if (x.rank() != 4 || x.dim(1) != model.spec.resolution || x.dim(2) != model.spec.resolution) {
    throw ResolutionMismatch("model vjp: input " + to_string(x.shape()) +
                             " does not match model resolution " +
                             std::to_string(model.spec.resolution));
  }
  // Forward, recording the input of every unit.
  const Tensor<Scalar> stem_out = stem_forward(model.stem, x);
  std::array<Tensor<Scalar>, kNumStages> agg_in;
  std::array<std::vector<Tensor<Scalar>>, kNumStages> block_in;
  Tensor<Scalar> h = stem_out;
  for (std::size_t i = 0; i < kNumStages; ++i) {
    const auto& stage = model.stages[i];
    agg_in[i] = h;
    h = patch_agg_forward(stage.agg, h);
    for (const auto& block : stage.blocks) {
      block_in[i].push_back(h);
      h = cmt_block_forward(block, stage.rel_bias, h);
    }
  }
  const Tensor<Scalar> pooled = global_avg_pool(h);
  const Tensor<Scalar> fc = linear(pooled, model.head.fc);
  const Tensor<Scalar> act = gelu(fc);

  ModelVjp<Scalar> out;
  out.logits = linear(act, model.head.classifier);
  const Tensor<Scalar> g = cotangent(out.logits);

  out.params.spec = model.spec;
  out.params.seed = model.seed;
  auto cls = linear_vjp(act, model.head.classifier, g);
  auto head = linear_vjp(pooled, model.head.fc, gelu_vjp(fc, cls.input));
  out.params.head.classifier = std::move(cls.params);
  out.params.head.fc = std::move(head.params);
  Tensor<Scalar> grad = global_avg_pool_vjp(h.shape(), head.input);

  for (std::size_t ii = kNumStages; ii-- > 0;) {
    const auto& stage = model.stages[ii];
    auto& gstage = out.params.stages[ii];
    gstage.blocks.resize(stage.blocks.size());
    gstage.rel_bias = zeros_like(stage.rel_bias);
    for (std::size_t b = stage.blocks.size(); b-- > 0;) {
      auto blk = cmt_block_vjp(stage.blocks[b], stage.rel_bias, block_in[ii][b], grad);
      gstage.blocks[b] = std::move(blk.params);
      if (!stage.rel_bias.empty()) gstage.rel_bias += blk.rel_bias;
      grad = std::move(blk.input);
    }
    auto agg = patch_agg_vjp(stage.agg, agg_in[ii], grad);
    gstage.agg = std::move(agg.params);
    grad = std::move(agg.input);
  }
  auto stem = stem_vjp(model.stem, x, grad);
  out.params.stem = std::move(stem.params);
  out.input = std::move(stem.input);
  return out;
}

template <typename Scalar>
CrossEntropy softmax_cross_entropy(const Tensor<Scalar>& logits, const std::vector<Index>& labels) {
  if (logits.rank() != 2 || static_cast<Index>(labels.size()) != logits.dim(0)) {
    throw DimensionError("cross entropy: logits " + to_string(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  const Index n = logits.dim(0), c = logits.dim(1);
  const Tensord probs = softmax_rows(logits.template cast<double>());
  CrossEntropy out;
  out.dlogits = probs;
  for (Index i = 0; i < n; ++i) {
    const Index y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw DimensionError("cross entropy: label " + std::to_string(y) + " out of range");
    // log p_y via log-sum-exp for accuracy when p_y underflows.
    double mx = static_cast<double>(logits(i, 0));
    for (Index j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(logits(i, j)));
    double sum = 0;
    for (Index j = 0; j < c; ++j) sum += std::exp(static_cast<double>(logits(i, j)) - mx);
    out.loss -= static_cast<double>(logits(i, y)) - mx - std::log(sum);
    out.dlogits(i, y) -= 1.0;
  }
  out.loss /= static_cast<double>(n);
  out.dlogits.array() /= static_cast<double>(n);
  return out;
}

#define CMT_INSTANTIATE_GRAD(S)                                                                   \
  template MatmulVjp<S> matmul_vjp(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);         \
  template ParamVjp<S, Linear<S>> linear_vjp(const Tensor<S>&, const Linear<S>&, const Tensor<S>&); \
  template ParamVjp<S, ConvWeights<S>> conv2d_vjp(const Tensor<S>&, const ConvWeights<S>&,        \
                                                  const Tensor<S>&);                              \
  template ParamVjp<S, ConvWeights<S>> dwconv2d_vjp(const Tensor<S>&, const ConvWeights<S>&,      \
                                                    const Tensor<S>&);                            \
  template Tensor<S> softmax_rows_vjp(const Tensor<S>&, const Tensor<S>&);                        \
  template Tensor<S> gelu_vjp(const Tensor<S>&, const Tensor<S>&);                                \
  template ParamVjp<S, LayerNormParams<S>> layer_norm_vjp(const Tensor<S>&,                       \
                                                          const LayerNormParams<S>&,              \
                                                          const Tensor<S>&, double);              \
  template ParamVjp<S, BatchNormParams<S>> batch_norm_infer_vjp(const Tensor<S>&,                 \
                                                                const BatchNormParams<S>&,        \
                                                                const Tensor<S>&, double);        \
  template Tensor<S> global_avg_pool_vjp(const Shape&, const Tensor<S>&);                         \
  template Tensor<S> bicubic_resize_vjp(const Shape&, const Tensor<S>&);                          \
  template Tensor<S> permute_vjp(const std::vector<Index>&, const Tensor<S>&);                    \
  template AttentionVjp<S> attention_baseline_vjp(const Tensor<S>&, const Tensor<S>&,             \
                                                  const Tensor<S>&, const Tensor<S>&);            \
  template ParamVjp<S, ConvWeights<S>> reduce_tokens_vjp(const Tensor<S>&, const ConvWeights<S>&, \
                                                         Index, const Tensor<S>&);                \
  template ParamVjp<S, LPUParams<S>> lpu_vjp(const LPUParams<S>&, const Tensor<S>&,               \
                                             const Tensor<S>&);                                   \
  template BiasedVjp<S, LMHSAParams<S>> lmhsa_vjp(const LMHSAParams<S>&, const Tensor<S>&,        \
                                                  const Tensor<S>&, const Tensor<S>&);            \
  template ParamVjp<S, FFNParams<S>> ffn_baseline_vjp(const FFNParams<S>&, const Tensor<S>&,      \
                                                      const Tensor<S>&);                          \
  template ParamVjp<S, IRFFNParams<S>> irffn_vjp(const IRFFNParams<S>&, const Tensor<S>&,         \
                                                 const Tensor<S>&, double);                       \
  template BiasedVjp<S, CMTBlockParams<S>> cmt_block_vjp(const CMTBlockParams<S>&,                \
                                                         const Tensor<S>&, const Tensor<S>&,      \
                                                         const Tensor<S>&, double);               \
  template ParamVjp<S, StemParams<S>> stem_vjp(const StemParams<S>&, const Tensor<S>&,            \
                                               const Tensor<S>&, double);                         \
  template ParamVjp<S, PatchAggParams<S>> patch_agg_vjp(const PatchAggParams<S>&,                 \
                                                        const Tensor<S>&, const Tensor<S>&,       \
                                                        double);                                  \
  template ModelVjp<S> model_vjp(const ModelT<S>&, const Tensor<S>&,                              \
                                 const std::function<Tensor<S>(const Tensor<S>&)>&);              \
  template CrossEntropy softmax_cross_entropy(const Tensor<S>&, const std::vector<Index>&);

CMT_INSTANTIATE_GRAD(float)
CMT_INSTANTIATE_GRAD(double)

}  // namespace cmt
