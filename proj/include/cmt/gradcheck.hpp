#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cmt/tensor.hpp"

namespace cmt {

/// One differentiable argument of a sampled problem. Variables with
/// probe == false (BN running statistics) are held fixed by the checker.
/// `zero_grad` marks arguments whose derivative is identically zero (key-path
/// biases shift every logit of a softmax row equally); they are probed
/// against an absolute bound instead of the relative metric.
struct GradVar {
  std::string name;
  Tensord value;
  bool probe = true;
  bool zero_grad = false;
};

/// A concrete instance of an op: its arguments plus closures evaluating the
/// forward pass and the VJP at any argument values of the same shapes.
struct GradProblem {
  std::vector<GradVar> vars;
  std::function<Tensord(const std::vector<GradVar>&)> forward;
  /// Cotangents aligned with `vars`.
  std::function<std::vector<Tensord>(const std::vector<GradVar>&, const Tensord&)> vjp;
};

struct GradOp {
  std::string name;
  std::function<GradProblem(std::uint64_t seed)> sample;
};

/// Every forward op of the tensor kernels and blocks, plus a toy full model.
const std::vector<GradOp>& grad_ops();
std::vector<std::string> grad_op_names();
/// Throws ConfigError listing the known names.
const GradOp& find_grad_op(const std::string& name);

/// Analytic cotangents of `op` sampled at `seed` against `cotangent`.
std::vector<Tensord> vjp(const std::string& op, std::uint64_t seed, const Tensord& cotangent);

/// Same op with every returned cotangent negated: a must-fail control.
GradOp sign_flipped(const GradOp& op);

inline constexpr double kGradCheckEps = 1e-4;
inline constexpr double kGradCheckThreshold = 1e-4;
inline constexpr int kGradCheckProbes = 32;
/// Both derivatives of a zero_grad variable must stay below this.
inline constexpr double kZeroGradTolerance = 1e-9;

struct GradCheckEntry {
  std::string name;
  double max_rel = 0;
  double max_abs = 0;
  int probes = 0;
  bool zero_grad = false;  // max_abs bounds |analytic| and |numeric| instead

  bool passed(double threshold) const {
    return zero_grad ? max_abs < kZeroGradTolerance : max_rel < threshold;
  }
};

struct GradCheckReport {
  std::string op;
  std::uint64_t seed = 0;
  double eps = kGradCheckEps;
  double threshold = kGradCheckThreshold;
  std::vector<GradCheckEntry> entries;

  double max_rel() const;
  int probes() const;
  bool passed() const;
  std::string render() const;
  std::string to_json() const;
};

/// Compares analytic derivatives of a random scalar projection of the output
/// with central differences at `probes` scalar coordinates. Variables are
/// visited round-robin in a seed-shuffled order, so each gets probed when
/// probes >= variables. Relative error: |a - n| / max(|a|, |n|, 1e-8).
GradCheckReport finite_diff_check(const GradOp& op, std::uint64_t seed, double eps = kGradCheckEps,
                                  int probes = kGradCheckProbes);
GradCheckReport finite_diff_check(const std::string& op, std::uint64_t seed,
                                  double eps = kGradCheckEps, int probes = kGradCheckProbes);

}  // namespace cmt
