#pragma once

#include "cmt/blocks.hpp"
#include "cmt/rng.hpp"

// Random parameter structs for property checks. Every draw is rounded
// through float, so building the same fixture with Scalar = float and
// Scalar = double from equal seeds yields numerically identical values.

namespace cmt::fixtures {

inline double draw(Rng& rng, double std) { return static_cast<float>(rng.normal() * std); }

inline Index pick(Rng& rng, Index lo, Index hi) { return lo + rng.below(hi - lo + 1); }

template <typename S>
Tensor<S> normal(Shape shape, Rng& rng, double std = 1.0) {
  Tensor<S> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<S>(draw(rng, std));
  return t;
}

template <typename S>
Tensor<S> uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor<S> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<S>(static_cast<float>(rng.uniform(lo, hi)));
  return t;
}

template <typename S>
Linear<S> linear(Rng& rng, Index din, Index dout) {
  const double std = 1.0 / std::sqrt(static_cast<double>(din));
  return {normal<S>({din, dout}, rng, std), normal<S>({dout}, rng, 0.1)};
}

template <typename S>
ConvWeights<S> conv(Rng& rng, Index k, Index cin, Index cout, Index stride, Padding pad) {
  const double std = 1.0 / std::sqrt(static_cast<double>(k * k * cin));
  return {normal<S>({k, k, cin, cout}, rng, std), normal<S>({cout}, rng, 0.1), stride, pad};
}

template <typename S>
ConvWeights<S> dw(Rng& rng, Index k, Index c, Index stride, Padding pad) {
  return {normal<S>({k, k, c}, rng, 1.0 / static_cast<double>(k)), normal<S>({c}, rng, 0.1), stride, pad};
}

template <typename S>
LayerNormParams<S> layer_norm(Rng& rng, Index d) {
  LayerNormParams<S> p{normal<S>({d}, rng, 0.2), normal<S>({d}, rng, 0.2)};
  for (auto& g : p.gamma.values()) g += S(1);
  return p;
}

template <typename S>
BatchNormParams<S> batch_norm(Rng& rng, Index c) {
  BatchNormParams<S> p{normal<S>({c}, rng, 0.2), normal<S>({c}, rng, 0.2), normal<S>({c}, rng, 0.3),
                       uniform<S>({c}, rng, 0.5, 2.0)};
  for (auto& g : p.gamma.values()) g += S(1);
  return p;
}

template <typename S>
LMHSAParams<S> lmhsa(Rng& rng, Index d, Index heads, Index k) {
  LMHSAParams<S> p;
  p.heads = heads;
  p.reduction = k;
  p.q = linear<S>(rng, d, d);
  p.k = linear<S>(rng, d, d);
  p.v = linear<S>(rng, d, d);
  if (k > 1) {
    p.dw_k = dw<S>(rng, k, d, k, Padding{});
    p.dw_v = dw<S>(rng, k, d, k, Padding{});
  }
  p.o = linear<S>(rng, d, d);
  return p;
}

template <typename S>
IRFFNParams<S> irffn(Rng& rng, Index d, Index hidden) {
  IRFFNParams<S> p;
  p.expand = linear<S>(rng, d, hidden);
  p.bn1 = batch_norm<S>(rng, hidden);
  p.dw = dw<S>(rng, 3, hidden, 1, Padding::same(3, 3));
  p.bn2 = batch_norm<S>(rng, hidden);
  p.project = linear<S>(rng, hidden, d);
  p.bn3 = batch_norm<S>(rng, d);
  return p;
}

template <typename S>
CMTBlockParams<S> block(Rng& rng, Index d, Index heads, Index k, Index hidden) {
  CMTBlockParams<S> p;
  p.lpu.dw = dw<S>(rng, 3, d, 1, Padding::same(3, 3));
  p.ln1 = layer_norm<S>(rng, d);
  p.attn = lmhsa<S>(rng, d, heads, k);
  p.ln2 = layer_norm<S>(rng, d);
  p.ffn = irffn<S>(rng, d, hidden);
  return p;
}

template <typename S>
StemParams<S> stem(Rng& rng, Index c) {
  StemParams<S> p;
  for (int i = 0; i < 3; ++i) {
    p.conv[i] = conv<S>(rng, 3, i == 0 ? 3 : c, c, i == 0 ? 2 : 1, Padding::same(3, 3));
    p.bn[i] = batch_norm<S>(rng, c);
  }
  return p;
}

template <typename S>
PatchAggParams<S> patch_agg(Rng& rng, Index cin, Index cout) {
  return {conv<S>(rng, 2, cin, cout, 2, Padding{}), layer_norm<S>(rng, cout)};
}

}  // namespace cmt::fixtures
