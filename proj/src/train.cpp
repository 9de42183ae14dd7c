#include "cmt/train.hpp"

#include <cmath>

#include "cmt/cost.hpp"
#include "cmt/grad.hpp"
#include "cmt/model.hpp"
#include "cmt/rng.hpp"

namespace cmt {

Dataset synthetic_dataset(Index resolution, Index samples, Index classes, std::uint64_t seed) {
  if (samples < 1 || classes < 2) throw ConfigError("dataset: need >= 1 sample and >= 2 classes");
  Rng rng(seed);
  const Shape image{resolution, resolution, 3};
  std::vector<Tensord> templates;
  for (Index c = 0; c < classes; ++c) templates.push_back(random_normal<double>(image, rng));
  Dataset d;
  d.num_classes = classes;
  d.images = Tensord({samples, resolution, resolution, 3});
  const Index per = shape_size(image);
  for (Index i = 0; i < samples; ++i) {
    const Index label = i % classes;
    d.labels.push_back(label);
    const Tensord& t = templates[static_cast<std::size_t>(label)];
    for (Index j = 0; j < per; ++j) d.images[i * per + j] = t[j] + 0.5 * rng.normal();
  }
  return d;
}

Dataset shuffle_labels(const Dataset& data, std::uint64_t seed) {
  Dataset out = data;
  Rng rng(seed);
  for (std::size_t i = out.labels.size(); i > 1; --i) {
    std::swap(out.labels[i - 1], out.labels[static_cast<std::size_t>(rng.below(static_cast<Index>(i)))]);
  }
  return out;
}

ModelSpec toy_spec() {
  ModelSpec spec;
  spec.name = "toy";
  spec.stem_channels = 8;
  const std::array<Index, 4> dims{8, 16, 32, 64}, heads{1, 2, 4, 8}, red{8, 4, 2, 1};
  for (std::size_t i = 0; i < kNumStages; ++i) spec.stages[i] = {1, dims[i], heads[i], red[i], 4.0};
  spec.resolution = 32;
  spec.num_classes = 2;
  return spec;
}

double TrainResult::mean_loss() const {
  if (losses.empty()) return 0.0;
  double sum = 0;
  for (double l : losses) sum += l;
  return sum / static_cast<double>(losses.size());
}

Index TrainResult::first_below(double target) const {
  for (std::size_t i = 0; i < losses.size(); ++i) {
    if (losses[i] < target) return static_cast<Index>(i);
  }
  return -1;
}

namespace {

// He normal, fan-out mode, over every conv kernel. Linear layers and the
// relative bias keep build()'s trunc-normal draw.
void he_init_convs(ModelT<double>& model, std::uint64_t seed) {
  Rng rng(seed ^ 0x5851f42d4c957f2dULL);
  visit_model(model, [&](const std::string& name, Tensord& t, bool) {
    if (!name.ends_with(".weight") || t.rank() < 3) return;
    const Index fan_out = t.dim(0) * t.dim(1) * (t.rank() == 4 ? t.dim(3) : 1);
    const double std = std::sqrt(2.0 / static_cast<double>(fan_out));
    for (auto& v : t.values()) v = std * rng.normal();
  });
}

}  // namespace

TrainResult micro_train(const ModelSpec& spec, const Dataset& data, Index steps, double lr,
                        std::uint64_t seed) {
  const Index params = count_params(spec).total_params();
  if (params > kMaxTrainParams) {
    throw ConfigError("micro_train: spec has " + std::to_string(params) + " parameters, limit " +
                      std::to_string(kMaxTrainParams));
  }
  const Index n = data.images.dim(0);
  if (n > kMaxTrainSamples) {
    throw ConfigError("micro_train: " + std::to_string(n) + " samples, limit " +
                      std::to_string(kMaxTrainSamples));
  }
  if (data.num_classes != spec.num_classes) {
    throw ConfigError("micro_train: dataset has " + std::to_string(data.num_classes) +
                      " classes, spec " + std::to_string(spec.num_classes));
  }

  ModelT<double> model = build<double>(spec, seed);
  he_init_convs(model, seed);
  TrainResult result;
  for (Index step = 0; step <= steps; ++step) {
    CrossEntropy ce;
    auto grads = model_vjp<double>(model, data.images, [&](const Tensord& logits) {
      ce = softmax_cross_entropy(logits, data.labels);
      return ce.dlogits;
    });
    if (!std::isfinite(ce.loss)) {
      result.diverged = true;
      result.divergence_step = step;
      result.message = "loss became non-finite at step " + std::to_string(step) + " (lr " +
                       std::to_string(lr) + ")";
      return result;
    }
    result.losses.push_back(ce.loss);
    if (step == steps) break;

    std::vector<Tensord*> g;
    visit_model(grads.params, [&](const std::string&, Tensord& t, bool) { g.push_back(&t); });
    std::size_t i = 0;
    visit_model(model, [&](const std::string&, Tensord& t, bool learnable) {
      const Tensord& d = *g[i++];
      if (learnable) t.array() -= lr * d.array();
    });
  }
  return result;
}

}  // namespace cmt
