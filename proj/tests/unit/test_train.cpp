#include "doctest.h"

#include <cmath>

#include "cmt/cost.hpp"
#include "cmt/errors.hpp"
#include "cmt/train.hpp"

using namespace cmt;

TEST_CASE("toy spec stays inside the training limits") {
  const ModelSpec spec = toy_spec();
  CHECK_NOTHROW(spec.validate());
  CHECK(count_params(spec).total_params() <= kMaxTrainParams);
  CHECK(spec.stages[0].dim == 8);
  CHECK(spec.stages[3].dim == 64);
  CHECK(spec.resolution == 32);
  CHECK(spec.num_classes == 2);
}

TEST_CASE("synthetic data is seeded and balanced") {
  const Dataset a = synthetic_dataset(32, 16, 2, 7), b = synthetic_dataset(32, 16, 2, 7);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK(a.images.shape() == Shape{16, 32, 32, 3});
  Index ones = 0;
  for (Index y : a.labels) ones += y;
  CHECK(ones == 8);
  CHECK_FALSE(synthetic_dataset(32, 16, 2, 8).images == a.images);

  const Dataset s = shuffle_labels(a, 1);
  CHECK(s.images == a.images);
  CHECK(s.labels != a.labels);
  Index shuffled_ones = 0;
  for (Index y : s.labels) shuffled_ones += y;
  CHECK(shuffled_ones == 8);
}

TEST_CASE("zero learning rate keeps the loss constant") {
  const Dataset data = synthetic_dataset(32, 4, 2, 7);
  const TrainResult r = micro_train(toy_spec(), data, 3, 0.0, 0);
  REQUIRE(r.losses.size() == 4);
  for (double l : r.losses) CHECK(l == r.losses[0]);
  CHECK_FALSE(r.diverged);
}

TEST_CASE("training is bitwise reproducible and lowers the loss") {
  const Dataset data = synthetic_dataset(32, 8, 2, 7);
  const TrainResult a = micro_train(toy_spec(), data, 10, kToyLearningRate, 0);
  const TrainResult b = micro_train(toy_spec(), data, 10, kToyLearningRate, 0);
  CHECK(a.losses == b.losses);
  CHECK(a.final_loss() < a.losses.front());
  CHECK(a.mean_loss() < a.losses.front());
}

TEST_CASE("divergence is reported with its step") {
  const Dataset data = synthetic_dataset(32, 4, 2, 7);
  const TrainResult r = micro_train(toy_spec(), data, 30, 1e6, 0);
  CHECK(r.diverged);
  CHECK(r.divergence_step >= 1);
  CHECK(r.divergence_step <= 30);
  CHECK(static_cast<Index>(r.losses.size()) == r.divergence_step);
  CHECK(r.message.find(std::to_string(r.divergence_step)) != std::string::npos);
}

TEST_CASE("loss curve helpers") {
  TrainResult r;
  r.losses = {1.0, 0.5, 0.04, 0.01};
  CHECK(r.first_below(0.05) == 2);
  CHECK(r.first_below(0.001) == -1);
  CHECK(r.mean_loss() == doctest::Approx(0.3875));
  CHECK(r.final_loss() == 0.01);
}

TEST_CASE("limits are enforced") {
  CHECK_THROWS_AS(micro_train(preset("CMT-Ti"), synthetic_dataset(160, 2, 2, 0), 1, 0.1, 0), ConfigError);
  CHECK_THROWS_AS(micro_train(toy_spec(), synthetic_dataset(32, 65, 2, 0), 1, 0.1, 0), ConfigError);
  CHECK_THROWS_AS(micro_train(toy_spec(), synthetic_dataset(32, 6, 3, 0), 1, 0.1, 0), ConfigError);
}
