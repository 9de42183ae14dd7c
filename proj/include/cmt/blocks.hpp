#pragma once

#include <vector>

#include "cmt/kernels.hpp"

namespace cmt {

/// Local perception unit: residual 3x3 depthwise convolution.
template <typename Scalar>
struct LPUParams {
  ConvWeights<Scalar> dw;
  bool shortcut = true;
};

/// Lightweight multi-head self-attention. For reduction k > 1 the key and
/// value token maps are first shrunk by k x k stride-k depthwise convolutions
/// (dw_k, dw_v), then projected; for k == 1 both reductions are the identity
/// and dw_k/dw_v stay empty. The relative position bias [heads, n, n/k^2] is
/// owned by the stage and passed to the forward call.
template <typename Scalar>
struct LMHSAParams {
  Linear<Scalar> q, k, v, o;
  ConvWeights<Scalar> dw_k, dw_v;
  Index heads = 1;
  Index reduction = 1;

  Index dim() const { return q.in_features(); }
  Index head_dim() const { return dim() / heads; }
};

/// Inverted residual FFN: expand -> GELU -> BN -> (DW + shortcut) -> GELU ->
/// BN -> project -> BN.
template <typename Scalar>
struct IRFFNParams {
  Linear<Scalar> expand;
  BatchNormParams<Scalar> bn1;
  ConvWeights<Scalar> dw;
  BatchNormParams<Scalar> bn2;
  Linear<Scalar> project;
  BatchNormParams<Scalar> bn3;
  bool shortcut = true;

  Index hidden() const { return expand.out_features(); }
};

/// Plain two-layer transformer FFN (d -> r d -> d) with GELU in between.
template <typename Scalar>
struct FFNParams {
  Linear<Scalar> fc1;
  Linear<Scalar> fc2;
};

template <typename Scalar>
struct CMTBlockParams {
  LPUParams<Scalar> lpu;
  LayerNormParams<Scalar> ln1;
  LMHSAParams<Scalar> attn;
  LayerNormParams<Scalar> ln2;
  IRFFNParams<Scalar> ffn;
};

/// Three 3x3 convolutions (stride 2, 1, 1), each followed by BN and GELU.
template <typename Scalar>
struct StemParams {
  ConvWeights<Scalar> conv[3];
  BatchNormParams<Scalar> bn[3];
};

/// 2x2 stride-2 convolution followed by layer normalization over channels.
template <typename Scalar>
struct PatchAggParams {
  ConvWeights<Scalar> conv;
  LayerNormParams<Scalar> ln;
};

/// Intermediates recorded by lmhsa_forward when a trace is requested.
template <typename Scalar>
struct LMHSATrace {
  /// Post-softmax attention weights, [n, m] per (sample, head), sample-major.
  std::vector<Tensor<Scalar>> weights;
};

template <typename Scalar>
struct BlockTrace {
  Tensor<Scalar> after_lpu;        // X'
  Tensor<Scalar> after_attention;  // X''
  LMHSATrace<Scalar> attention;
};

template <typename Scalar>
Tensor<Scalar> lpu_forward(const LPUParams<Scalar>& p, const Tensor<Scalar>& x);

/// Softmax(Q K^T / sqrt(d_k)) V for [n, d_k], [m, d_k], [m, d_v] operands.
template <typename Scalar>
Tensor<Scalar> attention_baseline(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                                  const Tensor<Scalar>& v);

/// Spatial extent after a stride-k reduction with trailing zero padding.
inline Index reduced_extent(Index extent, Index k) { return (extent + k - 1) / k; }

/// Token map shrunk by the k x k stride-k depthwise weights, zero-padding the
/// trailing edges when the extents are not multiples of k.
template <typename Scalar>
Tensor<Scalar> reduce_tokens(const Tensor<Scalar>& x, const ConvWeights<Scalar>& w, Index k);

/// `rel_bias` is [heads, H*W, m] or empty for B = 0.
template <typename Scalar>
Tensor<Scalar> lmhsa_forward(const LMHSAParams<Scalar>& p, const Tensor<Scalar>& rel_bias,
                             const Tensor<Scalar>& x, LMHSATrace<Scalar>* trace = nullptr);

template <typename Scalar>
Tensor<Scalar> ffn_baseline(const FFNParams<Scalar>& p, const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> irffn_forward(const IRFFNParams<Scalar>& p, const Tensor<Scalar>& x,
                             double eps = kDefaultEps);

template <typename Scalar>
Tensor<Scalar> cmt_block_forward(const CMTBlockParams<Scalar>& p, const Tensor<Scalar>& rel_bias,
                                 const Tensor<Scalar>& x, BlockTrace<Scalar>* trace = nullptr,
                                 double eps = kDefaultEps);

template <typename Scalar>
Tensor<Scalar> stem_forward(const StemParams<Scalar>& p, const Tensor<Scalar>& x,
                            double eps = kDefaultEps);

template <typename Scalar>
Tensor<Scalar> patch_agg_forward(const PatchAggParams<Scalar>& p, const Tensor<Scalar>& x,
                                 double eps = kDefaultEps);

}  // namespace cmt
