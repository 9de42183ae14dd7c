#pragma once

#include <vector>

#include "cmt/blocks.hpp"
#include "cmt/model.hpp"

// Reference implementations in plain 64-bit loops. They share only the
// parameter structs and the Tensor container with the library; every index
// computation, reduction and special function is written out again here.

namespace cmt::oracle {

Tensord matmul(const Tensord& a, const Tensord& b);
Tensord linear(const Tensord& x, const Linear<double>& p);
Tensord conv2d(const Tensord& x, const ConvWeights<double>& w);
Tensord dwconv2d(const Tensord& x, const ConvWeights<double>& w);
Tensord softmax_rows(const Tensord& x);
double gelu(double x);
Tensord gelu(const Tensord& x);
Tensord layer_norm(const Tensord& x, const LayerNormParams<double>& p, double eps = kDefaultEps);
Tensord batch_norm(const Tensord& x, const BatchNormParams<double>& p, double eps = kDefaultEps);
Tensord global_avg_pool(const Tensord& x);
/// Direct 16-tap evaluation of the align-corners Catmull-Rom surface.
Tensord bicubic_resize(const Tensord& m, Index out_h, Index out_w);
Tensord permute(const Tensord& x, const std::vector<Index>& axes);

Tensord attention(const Tensord& q, const Tensord& k, const Tensord& v);
Tensord lpu(const LPUParams<double>& p, const Tensord& x);
/// Per head and per query token: logits against the reduced keys plus the
/// bias row, softmax, weighted reduced values; then the output projection.
Tensord lmhsa(const LMHSAParams<double>& p, const Tensord& rel_bias, const Tensord& x);
Tensord ffn(const FFNParams<double>& p, const Tensord& x);
Tensord irffn(const IRFFNParams<double>& p, const Tensord& x, double eps = kDefaultEps);
Tensord cmt_block(const CMTBlockParams<double>& p, const Tensord& rel_bias, const Tensord& x,
                  double eps = kDefaultEps);
Tensord stem(const StemParams<double>& p, const Tensord& x, double eps = kDefaultEps);
Tensord patch_agg(const PatchAggParams<double>& p, const Tensord& x, double eps = kDefaultEps);
/// Logits of the full network.
Tensord model_logits(const ModelT<double>& model, const Tensord& x);

}  // namespace cmt::oracle
