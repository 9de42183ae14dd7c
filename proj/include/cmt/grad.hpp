#pragma once

#include <functional>
#include <vector>

#include "cmt/blocks.hpp"
#include "cmt/model.hpp"

// Reverse-mode derivatives (vector-Jacobian products) of every forward op.
// Parameter gradients come back in the same struct type as the parameters,
// with the same set of non-empty tensors, so the params:: visitors walk a
// value and its gradient in lockstep. BN running statistics are frozen: their
// gradient slots are zero-filled.

namespace cmt {

template <typename Scalar>
struct MatmulVjp {
  Tensor<Scalar> a;
  Tensor<Scalar> b;
};

template <typename Scalar, typename Params>
struct ParamVjp {
  Tensor<Scalar> input;
  Params params;
};

/// For attention-bearing ops: also the cotangent of the relative bias.
template <typename Scalar, typename Params>
struct BiasedVjp {
  Tensor<Scalar> input;
  Params params;
  Tensor<Scalar> rel_bias;
};

template <typename Scalar>
struct AttentionVjp {
  Tensor<Scalar> q;
  Tensor<Scalar> k;
  Tensor<Scalar> v;
};

template <typename Scalar>
MatmulVjp<Scalar> matmul_vjp(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const Tensor<Scalar>& g);

template <typename Scalar>
ParamVjp<Scalar, Linear<Scalar>> linear_vjp(const Tensor<Scalar>& x, const Linear<Scalar>& p,
                                            const Tensor<Scalar>& g);

template <typename Scalar>
ParamVjp<Scalar, ConvWeights<Scalar>> conv2d_vjp(const Tensor<Scalar>& x, const ConvWeights<Scalar>& w,
                                                 const Tensor<Scalar>& g);

template <typename Scalar>
ParamVjp<Scalar, ConvWeights<Scalar>> dwconv2d_vjp(const Tensor<Scalar>& x,
                                                   const ConvWeights<Scalar>& w,
                                                   const Tensor<Scalar>& g);

/// Takes the softmax output, not its input.
template <typename Scalar>
Tensor<Scalar> softmax_rows_vjp(const Tensor<Scalar>& y, const Tensor<Scalar>& g);

template <typename Scalar>
Tensor<Scalar> gelu_vjp(const Tensor<Scalar>& x, const Tensor<Scalar>& g);

template <typename Scalar>
ParamVjp<Scalar, LayerNormParams<Scalar>> layer_norm_vjp(const Tensor<Scalar>& x,
                                                         const LayerNormParams<Scalar>& p,
                                                         const Tensor<Scalar>& g,
                                                         double eps = kDefaultEps);

template <typename Scalar>
ParamVjp<Scalar, BatchNormParams<Scalar>> batch_norm_infer_vjp(const Tensor<Scalar>& x,
                                                               const BatchNormParams<Scalar>& p,
                                                               const Tensor<Scalar>& g,
                                                               double eps = kDefaultEps);

template <typename Scalar>
Tensor<Scalar> global_avg_pool_vjp(const Shape& input_shape, const Tensor<Scalar>& g);

/// Transpose of the (fixed, linear) resize map.
template <typename Scalar>
Tensor<Scalar> bicubic_resize_vjp(const Shape& input_shape, const Tensor<Scalar>& g);

template <typename Scalar>
Tensor<Scalar> permute_vjp(const std::vector<Index>& axes, const Tensor<Scalar>& g);

template <typename Scalar>
AttentionVjp<Scalar> attention_baseline_vjp(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                                            const Tensor<Scalar>& v, const Tensor<Scalar>& g);

template <typename Scalar>
ParamVjp<Scalar, ConvWeights<Scalar>> reduce_tokens_vjp(const Tensor<Scalar>& x,
                                                        const ConvWeights<Scalar>& w, Index k,
                                                        const Tensor<Scalar>& g);

template <typename Scalar>
ParamVjp<Scalar, LPUParams<Scalar>> lpu_vjp(const LPUParams<Scalar>& p, const Tensor<Scalar>& x,
                                            const Tensor<Scalar>& g);

/// Empty `rel_bias` means B = 0; the returned bias cotangent is then empty.
template <typename Scalar>
BiasedVjp<Scalar, LMHSAParams<Scalar>> lmhsa_vjp(const LMHSAParams<Scalar>& p,
                                                 const Tensor<Scalar>& rel_bias,
                                                 const Tensor<Scalar>& x, const Tensor<Scalar>& g);

template <typename Scalar>
ParamVjp<Scalar, FFNParams<Scalar>> ffn_baseline_vjp(const FFNParams<Scalar>& p,
                                                     const Tensor<Scalar>& x,
                                                     const Tensor<Scalar>& g);

template <typename Scalar>
ParamVjp<Scalar, IRFFNParams<Scalar>> irffn_vjp(const IRFFNParams<Scalar>& p, const Tensor<Scalar>& x,
                                                const Tensor<Scalar>& g, double eps = kDefaultEps);

template <typename Scalar>
BiasedVjp<Scalar, CMTBlockParams<Scalar>> cmt_block_vjp(const CMTBlockParams<Scalar>& p,
                                                        const Tensor<Scalar>& rel_bias,
                                                        const Tensor<Scalar>& x,
                                                        const Tensor<Scalar>& g,
                                                        double eps = kDefaultEps);

template <typename Scalar>
ParamVjp<Scalar, StemParams<Scalar>> stem_vjp(const StemParams<Scalar>& p, const Tensor<Scalar>& x,
                                              const Tensor<Scalar>& g, double eps = kDefaultEps);

template <typename Scalar>
ParamVjp<Scalar, PatchAggParams<Scalar>> patch_agg_vjp(const PatchAggParams<Scalar>& p,
                                                       const Tensor<Scalar>& x,
                                                       const Tensor<Scalar>& g,
                                                       double eps = kDefaultEps);

template <typename Scalar>
struct ModelVjp {
  Tensor<Scalar> logits;
  Tensor<Scalar> input;
  ModelT<Scalar> params;  // gradient per parameter, same layout as the model
};

/// Runs the forward pass, asks `cotangent` for dL/dlogits, and backpropagates.
template <typename Scalar>
ModelVjp<Scalar> model_vjp(const ModelT<Scalar>& model, const Tensor<Scalar>& x,
                           const std::function<Tensor<Scalar>(const Tensor<Scalar>&)>& cotangent);

struct CrossEntropy {
  double loss = 0;      // mean over the batch
  Tensord dlogits;      // d loss / d logits
};

/// Softmax cross-entropy of [N, classes] logits against integer labels.
template <typename Scalar>
CrossEntropy softmax_cross_entropy(const Tensor<Scalar>& logits, const std::vector<Index>& labels);

}  // namespace cmt
