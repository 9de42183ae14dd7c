// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "cli.hpp"
#include "cmt/container.hpp"
#include "cmt/cost.hpp"
#include "cmt/errors.hpp"
#include "cmt/model.hpp"
#include "cmt/rng.hpp"
#include "cmt/train.hpp"
#include "cmt/verify/suites.hpp"

using namespace cmt;

namespace {

constexpr double kParamBand = 0.03;
constexpr double kFlopBand = 0.05;
constexpr int kIdentityCases = 1000;
constexpr int kKernelCases = 100;
constexpr int kGradSeeds = 10;
constexpr double kRatioLow = 2.0;
constexpr double kRatioHigh = 2.6;
constexpr double kTransferIdentityTol = 1e-6;

// Runtime budgets in seconds.
constexpr double kBudgetParams = 1;
constexpr double kBudgetFlops = 1;
constexpr double kBudgetIdentities = 1;
constexpr double kBudgetKernels = 60;
constexpr double kBudgetBlocks = 30;
constexpr double kBudgetGradients = 300;
constexpr double kBudgetScaling = 5;
constexpr double kBudgetTransfer = 60;
constexpr double kBudgetTraining = 600;

struct Outcome {
  bool passed = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string title;
  double budget;  // seconds; 0 = none
  std::function<Outcome()> body;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string failed_checks(const verify::SuiteReport& r) {
  std::string out;
  for (const auto& c : r.checks) {
    if (!c.passed) out += (out.empty() ? "" : "; ") + c.name;
  }
  return out;
}

std::string worst_check(const verify::SuiteReport& r) {
  const verify::Check* worst = nullptr;
  for (const auto& c : r.checks) {
    if (c.tolerance > 0 && (!worst || c.worst / c.tolerance > worst->worst / worst->tolerance)) worst = &c;
  }
  return worst ? worst->name + " " + fmt("%.3g", worst->worst) + " (tol " + fmt("%.3g", worst->tolerance) + ")" : "";
}

Outcome suite_outcome(const verify::SuiteReport& r) {
  std::ostringstream os;
  os << r.checks.size() - static_cast<std::size_t>(r.failures()) << "/" << r.checks.size() << " checks pass";
  const std::string worst = worst_check(r);
  if (!worst.empty()) os << ", tightest " << worst;
  if (!r.passed()) os << "; failing: " << failed_checks(r);
  return {r.passed(), os.str()};
}

Outcome params_criterion() {
  Outcome o{true, {}};
  for (const auto& ref : reference_costs()) {
    const double m = static_cast<double>(count_params(preset(ref.variant)).total_params()) / 1e6;
    const double dev = m / ref.params_m - 1.0;
    const bool ok = std::abs(dev) <= kParamBand;
    o.passed = o.passed && ok;
    o.detail += ref.variant + " " + fmt("%.2fM", m) + " vs " + fmt("%.2fM", ref.params_m) + " (" +
                fmt("%+.1f%%", 100 * dev) + (ok ? "" : " OUT") + ")  ";
  }
  return o;
}

Outcome flops_criterion() {
  Outcome o{true, {}};
  for (const auto& ref : reference_costs()) {
    const double b = static_cast<double>(count_flops(preset(ref.variant), ref.resolution).total_flops()) / 1e9;
    const double dev = b / ref.flops_b - 1.0;
    const bool ok = std::abs(dev) <= kFlopBand;
    o.passed = o.passed && ok;
    o.detail += ref.variant + " " + fmt("%.3fB", b) + " @" + std::to_string(ref.resolution) + " vs " +
                fmt("%.2fB", ref.flops_b) + " (" + fmt("%+.1f%%", 100 * dev) + (ok ? "" : " OUT") + ")  ";
  }
  return o;
}

Outcome identity_criterion() {
  Rng rng(20240601);
  int block_bad = 0, transformer_bad = 0;
  for (int i = 0; i < kIdentityCases; ++i) {
    const std::int64_t n = 1 + rng.below(12544), d = 1 + rng.below(1024), k = 1 + rng.below(8);
    const CMTBlockFlops f = analytic_cmt_block(n, d, k);
    if (!(f.total == f.lpu + f.lmhsa + f.irffn)) ++block_bad;
    if (analytic_transformer_block(n, d) != analytic_mhsa(n, d, d, d) + analytic_ffn(n, d, 4)) ++transformer_bad;
  }
  return {block_bad == 0 && transformer_bad == 0,
          std::to_string(kIdentityCases) + " random (n,d,k): block total != parts in " + std::to_string(block_bad) +
              ", transformer != MHSA + FFN in " + std::to_string(transformer_bad)};
}

Outcome kernels_criterion() {
  verify::Options opt;
  opt.kernel_cases = kKernelCases;
  return suite_outcome(verify::kernel_suite(opt));
}

Outcome blocks_criterion() {
  verify::Options opt;
  opt.preset_forwards = true;
  return suite_outcome(verify::block_suite(opt));
}

Outcome gradients_criterion() {
  verify::Options opt;
  opt.grad_seeds = kGradSeeds;
  const verify::SuiteReport r = verify::gradient_suite(opt);
  Outcome o = suite_outcome(r);
  int controls = 0;
  for (const auto& c : r.checks) controls += c.name.find("sign-flipped") != std::string::npos ? 1 : 0;
  if (controls == 0) {
    o.passed = false;
    o.detail += "; no sign-flip negative control ran";
  } else {
    o.detail += "; " + std::to_string(controls) + " sign-flip controls rejected";
  }
  return o;
}

Outcome scaling_criterion() {
  Outcome o{true, {}};
  for (const auto& name : preset_names()) {
    const ModelSpec spec = preset(name);
    if (!(scale(spec, ScalingParams{}) == spec)) {
      o.passed = false;
      o.detail += name + " phi=0 changed the spec  ";
    }
    ScalingParams s;
    s.phi = 1.0;
    const ModelSpec up = scale(spec, s);
    const double ratio = static_cast<double>(count_flops(up, up.resolution).total_flops()) /
                         static_cast<double>(count_flops(spec, spec.resolution).total_flops());
    const bool ok = ratio >= kRatioLow && ratio <= kRatioHigh;
    o.passed = o.passed && ok;
    o.detail += name + " ratio " + fmt("%.3f", ratio) + (ok ? "" : " OUT") + "  ";
  }
  o.detail += "band [" + fmt("%.1f", kRatioLow) + ", " + fmt("%.1f", kRatioHigh) + "], alpha*beta^1.5*gamma^2 = " +
              fmt("%.3f", scaling_product(ScalingParams{}));
  return o;
}

Outcome transfer_criterion() {
  const Model m = build<float>(preset("CMT-S"), 0);
  const Model t = transfer_resolution(m, 256);
  const Shape before = m.stages[0].rel_bias.shape(), after = t.stages[0].rel_bias.shape();
  const bool shapes = before == Shape{1, 3136, 49} && after == Shape{1, 4096, 64};

  Rng rng(3);
  const Tensorf logits = forward(t, random_normal<float>({1, 256, 256, 3}, rng)).logits;
  const bool runs = logits.shape() == Shape{1, 1000} && all_finite(logits);

  const Model same = transfer_resolution(m, 224);
  double drift = 0;
  for (std::size_t i = 0; i < kNumStages; ++i) {
    drift = std::max(drift, static_cast<double>(max_abs_diff(same.stages[i].rel_bias, m.stages[i].rel_bias)));
  }
  const bool identity = drift < kTransferIdentityTol;
  return {shapes && runs && identity, "stage-1 bias " + to_string(before) + " -> " + to_string(after) +
                                          ", forward @256 " + (runs ? "ok" : "FAILED") +
                                          ", same-resolution drift " + fmt("%.3g", drift) + " (tol " +
                                          fmt("%.0e", kTransferIdentityTol) + ")"};
}

Outcome training_criterion() {
  const ModelSpec spec = toy_spec();
  const Dataset data = synthetic_dataset(spec.resolution, kToySamples, spec.num_classes, kToyDataSeed);
  const TrainResult truth = micro_train(spec, data, kToySteps, kToyLearningRate, kToyModelSeed);
  const TrainResult shuffled =
      micro_train(spec, shuffle_labels(data, kToyShuffleSeed), kToySteps, kToyLearningRate, kToyModelSeed);
  const Index hit = truth.first_below(kToyTargetLoss);
  const bool reaches = !truth.diverged && hit >= 0 && hit <= kToySteps;
  const bool beats = !shuffled.diverged ? truth.final_loss() < shuffled.final_loss() &&
                                              truth.mean_loss() < shuffled.mean_loss()
                                        : true;
  std::ostringstream os;
  os << "seed " << kToyModelSeed << ", lr " << kToyLearningRate << ": loss < " << kToyTargetLoss << " at step "
     << hit << ", final " << fmt("%.3g", truth.final_loss()) << "; shuffled final "
     << fmt("%.3g", shuffled.final_loss()) << ", mean " << fmt("%.3g", truth.mean_loss()) << " vs "
     << fmt("%.3g", shuffled.mean_loss());
  if (truth.diverged) os << "; " << truth.message;
  return {reaches && beats, os.str()};
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream(path, std::ios::binary) << bytes;
}

Outcome serialization_criterion() {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / ("cmt_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto file = [&](const char* name) { return (dir / name).string(); };

  Outcome o{true, {}};
  auto note = [&](bool ok, const std::string& what) {
    o.passed = o.passed && ok;
    o.detail += what + (ok ? " ok" : " FAILED") + "; ";
  };

  const Model m = build<float>(preset("CMT-Ti"), 0);
  save(m, file("ti.cmtw"));
  const Model back = load(file("ti.cmtw"));
  Rng rng(4);
  const Tensorf x = random_normal<float>({1, 160, 160, 3}, rng);
  note(forward(back, x).logits == forward(m, x).logits, "bitwise forward after save/load");

  save_tensors(file("x.cmtw"), {{"x", x}});
  const std::string bytes = read_bytes(file("ti.cmtw"));
  std::string magic = bytes, version = bytes;
  magic[0] = 'X';
  version[4] = 7;
  write_bytes(file("cut.cmtw"), bytes.substr(0, bytes.size() - 100));
  write_bytes(file("magic.cmtw"), magic);
  write_bytes(file("version.cmtw"), version);

  auto load_throws = [&](const char* name, auto tag) {
    try {
      load(file(name));
    } catch (const decltype(tag)&) {
      return true;
    } catch (...) {
    }
    return false;
  };
  note(load_throws("cut.cmtw", TruncatedError("")), "truncation error");
  note(load_throws("magic.cmtw", BadMagicError("")), "magic error");
  note(load_throws("version.cmtw", VersionError("")), "version error");

  std::ostringstream sink;
  for (const char* bad : {"cut.cmtw", "magic.cmtw", "version.cmtw"}) {
    const int code = cli::run({"infer", file(bad), file("x.cmtw"), "-o", file("logits.cmtw")}, sink, sink);
    note(code == cli::kIo, std::string("infer ") + bad + " exit " + std::to_string(code));
  }
  note(!fs::exists(file("logits.cmtw")), "no partial logits file");
  fs::remove_all(dir);
  return o;
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "parameter counts of the four presets within 3%", kBudgetParams, params_criterion},
      {2, "FLOPs at native resolution within 5%", kBudgetFlops, flops_criterion},
      {3, "closed-form block and transformer identities", kBudgetIdentities, identity_criterion},
      {4, "kernel oracle suite", kBudgetKernels, kernels_criterion},
      {5, "block reduction and identity suite", kBudgetBlocks, blocks_criterion},
      {6, "gradient suite with negative control", kBudgetGradients, gradients_criterion},
      {7, "compound scaling identity and FLOP ratio band", kBudgetScaling, scaling_criterion},
      {8, "relative bias transfer 224 -> 256", kBudgetTransfer, transfer_criterion},
      {9, "micro-training sanity", kBudgetTraining, training_criterion},
      {10, "serialization round trip and corruption handling", 0, serialization_criterion},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.body();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = c.budget <= 0 || secs < c.budget;
    const bool passed = o.passed && in_time;
    failures += passed ? 0 : 1;
    std::cout << (passed ? "PASS" : "FAIL") << "  [" << c.id << "] " << c.title << "  (" << fmt("%.2f", secs) << " s";
    if (c.budget > 0) std::cout << ", budget " << fmt("%.0f", c.budget) << " s" << (in_time ? "" : " EXCEEDED");
    std::cout << ")\n      " << o.detail << std::endl;
  }
  std::cout << (failures == 0 ? "acceptance: all criteria pass"
                              : "acceptance: " + std::to_string(failures) + " of " +
                                    std::to_string(criteria.size()) + " criteria fail")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
