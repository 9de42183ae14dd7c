#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmt/spec.hpp"
#include "cmt/tensor.hpp"

namespace cmt {

struct Dataset {
  Tensord images;  // [N, res, res, 3]
  std::vector<Index> labels;
  Index num_classes = 0;
};

/// Per-class random templates plus per-sample noise; labels cycle 0..classes-1.
Dataset synthetic_dataset(Index resolution, Index samples, Index classes, std::uint64_t seed);

/// Same images with labels permuted by a seeded shuffle.
Dataset shuffle_labels(const Dataset& data, std::uint64_t seed);

/// dims [8,16,32,64], one block per stage, 32x32 input, 2 classes.
ModelSpec toy_spec();

/// Pinned desk-scale run: 16 samples, 2 classes, 200 steps.
inline constexpr std::uint64_t kToyModelSeed = 0;
inline constexpr std::uint64_t kToyDataSeed = 7;
inline constexpr std::uint64_t kToyShuffleSeed = 1;
inline constexpr double kToyLearningRate = 0.03;
inline constexpr Index kToySamples = 16;
inline constexpr Index kToySteps = 200;
inline constexpr double kToyTargetLoss = 0.05;

inline constexpr Index kMaxTrainParams = 200'000;
inline constexpr Index kMaxTrainSamples = 64;

struct TrainResult {
  /// Full-batch loss before the first step and after every step.
  std::vector<double> losses;
  bool diverged = false;
  Index divergence_step = -1;
  std::string message;

  double final_loss() const { return losses.empty() ? 0.0 : losses.back(); }
  double mean_loss() const;
  /// First index with loss < target, or -1.
  Index first_below(double target) const;
};

/// Full-batch gradient descent on softmax cross-entropy, in double, from
/// build(spec, seed) with conv kernels redrawn He-normal (fan-out): under the
/// plain trunc-normal init the stem shrinks activations so far that the first
/// LayerNorm blows gradients up by ~1e4. BN statistics stay frozen. A non-finite loss stops the
/// run and is reported in the result rather than thrown.
TrainResult micro_train(const ModelSpec& spec, const Dataset& data, Index steps, double lr,
                        std::uint64_t seed);

}  // namespace cmt
