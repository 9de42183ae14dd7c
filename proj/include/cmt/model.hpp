#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cmt/blocks.hpp"
#include "cmt/params.hpp"
#include "cmt/spec.hpp"

namespace cmt {

/// Patch aggregation, the stage's relative position bias [heads, n, m]
/// (shared by every block of the stage), and the stacked CMT blocks.
template <typename Scalar>
struct StageParams {
  PatchAggParams<Scalar> agg;
  Tensor<Scalar> rel_bias;
  std::vector<CMTBlockParams<Scalar>> blocks;
};

/// GAP -> fc (head_width) -> GELU -> classifier.
template <typename Scalar>
struct HeadParams {
  Linear<Scalar> fc;
  Linear<Scalar> classifier;
};

/// A ModelSpec bound to weights. Treated as immutable once built or loaded;
/// transfer_resolution returns a new model.
template <typename Scalar>
struct ModelT {
  ModelSpec spec;
  std::uint64_t seed = 0;
  StemParams<Scalar> stem;
  std::array<StageParams<Scalar>, kNumStages> stages;
  HeadParams<Scalar> head;
};

using Model = ModelT<float>;

/// Calls f(name, tensor, learnable) for every model tensor in a fixed order.
template <typename M, typename F>
void visit_model(M& model, F&& f) {
  params::visit_stem("stem", model.stem, f);
  for (std::size_t i = 0; i < model.stages.size(); ++i) {
    auto& st = model.stages[i];
    const std::string prefix = "stages." + std::to_string(i);
    params::visit_patch_agg(prefix + ".agg", st.agg, f);
    params::visit_tensor(prefix + ".rel_bias", st.rel_bias, true, f);
    for (std::size_t b = 0; b < st.blocks.size(); ++b) {
      params::visit_block(prefix + ".blocks." + std::to_string(b), st.blocks[b], f);
    }
  }
  params::visit_linear("head.fc", model.head.fc, f);
  params::visit_linear("head.classifier", model.head.classifier, f);
}

/// Number of learnable scalars (BN running statistics excluded).
template <typename Scalar>
Index learnable_parameter_count(const ModelT<Scalar>& model) {
  Index total = 0;
  visit_model(model, [&](const std::string&, const Tensor<Scalar>& t, bool learnable) {
    if (learnable) total += t.size();
  });
  return total;
}

/// Allocates every tensor at its spec-derived shape and initializes it
/// deterministically: truncated normal (std 0.02, +-2 std) for conv/linear
/// weights and relative biases, zero biases, unit/zero norm affines, neutral
/// BN statistics.
template <typename Scalar>
ModelT<Scalar> build(const ModelSpec& spec, std::uint64_t seed);

template <typename Scalar>
struct ForwardResult {
  Tensor<Scalar> logits;                          // [N, num_classes]
  std::array<Tensor<Scalar>, kNumStages> pyramid;  // strides 4, 8, 16, 32
};

template <typename Scalar>
ForwardResult<Scalar> forward(const ModelT<Scalar>& model, const Tensor<Scalar>& x);

/// Bicubic-resizes every stage's relative bias to the geometry of `resolution`.
template <typename Scalar>
ModelT<Scalar> transfer_resolution(const ModelT<Scalar>& model, Index resolution);

template <typename To, typename From>
ModelT<To> cast_model(const ModelT<From>& model) {
  ModelT<To> out = build<To>(model.spec, model.seed);
  std::vector<const Tensor<From>*> src;
  visit_model(model, [&](const std::string&, const Tensor<From>& t, bool) { src.push_back(&t); });
  std::size_t i = 0;
  visit_model(out, [&](const std::string&, Tensor<To>& t, bool) { t = src[i++]->template cast<To>(); });
  return out;
}

/// Model file: CMTW container with the spec record ahead of the tensor table.
void save(const Model& model, const std::string& path);
Model load(const std::string& path);

}  // namespace cmt
