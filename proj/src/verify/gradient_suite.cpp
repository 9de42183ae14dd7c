#include <chrono>
#include <cstdio>

#include "cmt/grad.hpp"
#include "cmt/gradcheck.hpp"
#include "cmt/train.hpp"
#include "cmt/verify/fixtures.hpp"
#include "cmt/verify/suites.hpp"

namespace cmt::verify {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

void finite_differences(const Options& opt, CheckList& checks) {
  for (const GradOp& op : grad_ops()) {
    const std::string name = "vjp " + op.name + " vs central differences";
    for (int s = 0; s < opt.grad_seeds; ++s) {
      const std::uint64_t seed = opt.seed + static_cast<std::uint64_t>(s);
      const GradCheckReport r = finite_diff_check(op, seed);
      checks.within(name, r.max_rel(), kGradCheckThreshold,
                    std::to_string(opt.grad_seeds) + " seeds x " + std::to_string(r.probes()) + " probes");
      // Shift-invariant biases carry an exact-zero derivative instead.
      for (const auto& e : r.entries) {
        if (e.zero_grad) {
          checks.within("vjp " + op.name + " zero-derivative biases", e.max_abs, kZeroGradTolerance, e.name);
        }
      }
    }
    const GradCheckReport flipped = finite_diff_check(sign_flipped(op), opt.seed);
    checks.expect("sign-flipped vjp " + op.name + " is rejected", !flipped.passed(),
                  "max rel " + fmt(flipped.max_rel()));
  }
}

void dead_inputs(const Options& opt, CheckList& checks) {
  Rng rng(opt.seed);
  {  // masked-off depthwise channel
    const Index c = 4;
    const Tensord x = fixtures::normal<double>({2, 6, 5, c}, rng);
    auto w = fixtures::dw<double>(rng, 3, c, 1, Padding::same(3, 3));
    for (Index ky = 0; ky < 3; ++ky)
      for (Index kx = 0; kx < 3; ++kx) w.kernel(ky, kx, 1) = 0.0;
    const Tensord g = fixtures::normal<double>(dwconv2d(x, w).shape(), rng);
    const auto grads = dwconv2d_vjp(x, w, g);
    bool zero = true;
    for (Index i = 0; i < grads.input.size(); ++i) zero = zero && (i % c != 1 || grads.input[i] == 0.0);
    checks.expect("masked depthwise channel has exactly zero input gradient", zero);
  }
  {  // pixels skipped by a strided 1x1 convolution
    const Tensord x = fixtures::normal<double>({1, 7, 7, 2}, rng);
    const auto w = fixtures::conv<double>(rng, 1, 2, 3, 3, Padding{});
    const Tensord g = fixtures::normal<double>(conv2d(x, w).shape(), rng);
    const auto grads = conv2d_vjp(x, w, g);
    bool zero = true;
    for (Index y = 0; y < 7; ++y)
      for (Index xx = 0; xx < 7; ++xx)
        for (Index ch = 0; ch < 2; ++ch) {
          if (y % 3 != 0 || xx % 3 != 0) zero = zero && grads.input(0, y, xx, ch) == 0.0;
        }
    checks.expect("pixels outside every strided window have exactly zero gradient", zero);
  }
}

void micro_training(CheckList& checks) {
  const ModelSpec spec = toy_spec();
  const Dataset data = synthetic_dataset(spec.resolution, kToySamples, spec.num_classes, kToyDataSeed);

  const TrainResult frozen = micro_train(spec, data, 5, 0.0, kToyModelSeed);
  bool constant = !frozen.diverged;
  for (double l : frozen.losses) constant = constant && l == frozen.losses.front();
  checks.expect("micro_train lr=0 keeps the loss constant", constant);

  const TrainResult run = micro_train(spec, data, kToySteps, kToyLearningRate, kToyModelSeed);
  checks.within("micro_train reaches loss < 0.05 within 200 steps", run.final_loss(), kToyTargetLoss,
                "first below at step " + std::to_string(run.first_below(kToyTargetLoss)));
  const TrainResult again = micro_train(spec, data, kToySteps, kToyLearningRate, kToyModelSeed);
  checks.expect("micro_train is bitwise reproducible", run.losses == again.losses);

  const TrainResult shuffled =
      micro_train(spec, shuffle_labels(data, kToyShuffleSeed), kToySteps, kToyLearningRate, kToyModelSeed);
  checks.expect("true labels reach lower loss than shuffled labels",
                run.final_loss() < shuffled.final_loss() && run.mean_loss() < shuffled.mean_loss(),
                "final " + fmt(run.final_loss()) + " vs " + fmt(shuffled.final_loss()) + ", mean " +
                    fmt(run.mean_loss()) + " vs " + fmt(shuffled.mean_loss()));
}

}  // namespace

SuiteReport gradient_suite(const Options& opt) {
  const auto start = std::chrono::steady_clock::now();
  CheckList checks;
  finite_differences(opt, checks);
  dead_inputs(opt, checks);
  if (opt.micro_train) micro_training(checks);
  SuiteReport report{"gradients", std::move(checks).take(), 0};
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace cmt::verify
