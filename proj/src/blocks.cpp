#include "cmt/blocks.hpp"

#include <cmath>

namespace cmt {

namespace {

template <typename Scalar>
void require_even(const Tensor<Scalar>& x, const char* op) {
  if (x.rank() != 4) {
    throw DimensionError(std::string(op) + ": expected [N,H,W,C], got " + to_string(x.shape()));
  }
  if (x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0) {
    throw ConfigError(std::string(op) + ": spatial extents must be even, got " + to_string(x.shape()));
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> lpu_forward(const LPUParams<Scalar>& p, const Tensor<Scalar>& x) {
  if (p.dw.kernel.empty()) return x;
  Tensor<Scalar> y = dwconv2d(x, p.dw);
  if (y.shape() != x.shape()) {
    throw DimensionError("lpu: depthwise output " + to_string(y.shape()) + " does not preserve " +
                         to_string(x.shape()));
  }
  if (p.shortcut) y += x;
  return y;
}

template <typename Scalar>
Tensor<Scalar> attention_baseline(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                                  const Tensor<Scalar>& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) ||
      k.dim(0) != v.dim(0)) {
    throw DimensionError("attention: Q " + to_string(q.shape()) + ", K " + to_string(k.shape()) +
                         ", V " + to_string(v.shape()));
  }
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(q.dim(1)));
  Tensor<Scalar> logits({q.dim(0), k.dim(0)});
  logits.rows().noalias() = (q.rows() * k.rows().transpose()) * scale;
  return matmul(softmax_rows(logits), v);
}

template <typename Scalar>
Tensor<Scalar> reduce_tokens(const Tensor<Scalar>& x, const ConvWeights<Scalar>& w, Index k) {
  ConvWeights<Scalar> reduce = w;
  reduce.stride = k;
  reduce.padding = {0, reduced_extent(x.dim(1), k) * k - x.dim(1), 0,
                    reduced_extent(x.dim(2), k) * k - x.dim(2)};
  return dwconv2d(x, reduce);
}

template <typename Scalar>
Tensor<Scalar> lmhsa_forward(const LMHSAParams<Scalar>& p, const Tensor<Scalar>& rel_bias,
                             const Tensor<Scalar>& x, LMHSATrace<Scalar>* trace) {
  if (x.rank() != 4) throw DimensionError("lmhsa: expected [N,H,W,d], got " + to_string(x.shape()));
  const Index batch = x.dim(0), d = x.dim(3), heads = p.heads, kr = p.reduction;
  if (heads < 1 || d % heads != 0) {
    throw ConfigError("lmhsa: dim " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (p.q.in_features() != d) {
    throw DimensionError("lmhsa: projections expect width " + std::to_string(p.q.in_features()) +
                         ", input " + to_string(x.shape()));
  }
  const Index dh = d / heads;
  const Index n = x.dim(1) * x.dim(2);
  const Index m = reduced_extent(x.dim(1), kr) * reduced_extent(x.dim(2), kr);
  if (!rel_bias.empty() && rel_bias.shape() != Shape{heads, n, m}) {
    throw ResolutionMismatch("lmhsa: relative bias " + to_string(rel_bias.shape()) +
                             " does not match input " + to_string(x.shape()) + " (expected " +
                             to_string({heads, n, m}) +
                             "); run transfer_resolution for the new input size");
  }

  const Tensor<Scalar> q = linear(x, p.q);
  const Tensor<Scalar> keys = linear(kr > 1 ? reduce_tokens(x, p.dw_k, kr) : x, p.k);
  const Tensor<Scalar> values = linear(kr > 1 ? reduce_tokens(x, p.dw_v, kr) : x, p.v);

  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  Tensor<Scalar> concat(x.shape());
  RowMatrix<Scalar> logits(n, m);
  for (Index b = 0; b < batch; ++b) {
    ConstMatrixMap<Scalar> qb(q.data() + b * n * d, n, d);
    ConstMatrixMap<Scalar> kb(keys.data() + b * m * d, m, d);
    ConstMatrixMap<Scalar> vb(values.data() + b * m * d, m, d);
    MatrixMap<Scalar> ob(concat.data() + b * n * d, n, d);
    for (Index j = 0; j < heads; ++j) {
      logits.noalias() = (qb.middleCols(j * dh, dh) * kb.middleCols(j * dh, dh).transpose()) * scale;
      if (!rel_bias.empty()) logits += ConstMatrixMap<Scalar>(&rel_bias(j, 0, 0), n, m);
      for (Index r = 0; r < n; ++r) {
        logits.row(r).array() = (logits.row(r).array() - logits.row(r).maxCoeff()).exp();
        logits.row(r) /= logits.row(r).sum();
      }
      ob.middleCols(j * dh, dh).noalias() = logits * vb.middleCols(j * dh, dh);
      if (trace) {
        Tensor<Scalar> w({n, m});
        w.rows() = logits;
        trace->weights.push_back(std::move(w));
      }
    }
  }
  return linear(concat, p.o);
}

template <typename Scalar>
Tensor<Scalar> ffn_baseline(const FFNParams<Scalar>& p, const Tensor<Scalar>& x) {
  if (p.fc1.out_features() != p.fc2.in_features() || p.fc2.out_features() != x.dim(-1)) {
    throw DimensionError("ffn: widths " + to_string(p.fc1.weight.shape()) + " and " +
                         to_string(p.fc2.weight.shape()) + " do not chain for input " +
                         to_string(x.shape()));
  }
  return linear(gelu(linear(x, p.fc1)), p.fc2);
}

template <typename Scalar>
Tensor<Scalar> irffn_forward(const IRFFNParams<Scalar>& p, const Tensor<Scalar>& x, double eps) {
  if (p.expand.out_features() != p.project.in_features() || p.project.out_features() != x.dim(-1)) {
    throw DimensionError("irffn: widths " + to_string(p.expand.weight.shape()) + " and " +
                         to_string(p.project.weight.shape()) + " do not chain for input " +
                         to_string(x.shape()));
  }
  const Tensor<Scalar> hidden = batch_norm_infer(gelu(linear(x, p.expand)), p.bn1, eps);
  Tensor<Scalar> local = dwconv2d(hidden, p.dw);
  if (p.shortcut) local += hidden;
  return batch_norm_infer(linear(batch_norm_infer(gelu(local), p.bn2, eps), p.project), p.bn3, eps);
}

template <typename Scalar>
Tensor<Scalar> cmt_block_forward(const CMTBlockParams<Scalar>& p, const Tensor<Scalar>& rel_bias,
                                 const Tensor<Scalar>& x, BlockTrace<Scalar>* trace, double eps) {
  Tensor<Scalar> x1 = lpu_forward(p.lpu, x);
  Tensor<Scalar> x2 = lmhsa_forward(p.attn, rel_bias, layer_norm(x1, p.ln1, eps),
                                    trace ? &trace->attention : nullptr);
  x2 += x1;
  Tensor<Scalar> out = irffn_forward(p.ffn, layer_norm(x2, p.ln2, eps), eps);
  out += x2;
  if (trace) {
    trace->after_lpu = std::move(x1);
    trace->after_attention = std::move(x2);
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> stem_forward(const StemParams<Scalar>& p, const Tensor<Scalar>& x, double eps) {
  require_even(x, "stem");
  Tensor<Scalar> y = x;
  for (int i = 0; i < 3; ++i) y = gelu(batch_norm_infer(conv2d(y, p.conv[i]), p.bn[i], eps));
  return y;
}

template <typename Scalar>
Tensor<Scalar> patch_agg_forward(const PatchAggParams<Scalar>& p, const Tensor<Scalar>& x,
                                 double eps) {
  require_even(x, "patch aggregation");
  return layer_norm(conv2d(x, p.conv), p.ln, eps);
}

#define CMT_INSTANTIATE_BLOCKS(S)                                                                \
  template Tensor<S> lpu_forward(const LPUParams<S>&, const Tensor<S>&);                         \
  template Tensor<S> attention_baseline(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);   \
  template Tensor<S> reduce_tokens(const Tensor<S>&, const ConvWeights<S>&, Index);             \
  template Tensor<S> lmhsa_forward(const LMHSAParams<S>&, const Tensor<S>&, const Tensor<S>&,    \
                                   LMHSATrace<S>*);                                              \
  template Tensor<S> ffn_baseline(const FFNParams<S>&, const Tensor<S>&);                        \
  template Tensor<S> irffn_forward(const IRFFNParams<S>&, const Tensor<S>&, double);             \
  template Tensor<S> cmt_block_forward(const CMTBlockParams<S>&, const Tensor<S>&,               \
                                       const Tensor<S>&, BlockTrace<S>*, double);                \
  template Tensor<S> stem_forward(const StemParams<S>&, const Tensor<S>&, double);               \
  template Tensor<S> patch_agg_forward(const PatchAggParams<S>&, const Tensor<S>&, double);

CMT_INSTANTIATE_BLOCKS(float)
CMT_INSTANTIATE_BLOCKS(double)

}  // namespace cmt
