#include <chrono>
#include <cmath>
#include <cstdio>

#include "cmt/cost.hpp"
#include "cmt/errors.hpp"
#include "cmt/rng.hpp"
#include "cmt/verify/suites.hpp"

namespace cmt::verify {

namespace {

constexpr int kIdentityCases = 1000;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::int64_t pick(Rng& rng, std::int64_t lo, std::int64_t hi) { return lo + rng.below(hi - lo + 1); }

void table_totals(CheckList& checks) {
  std::int64_t previous = 0;
  bool increasing = true;
  for (const auto& ref : reference_costs()) {
    const ModelSpec spec = preset(ref.variant);
    const double params = static_cast<double>(count_params(spec).total_params()) / 1e6;
    const double flops = static_cast<double>(count_flops(spec, ref.resolution).total_flops()) / 1e9;
    checks.within(ref.variant + " params within 3% of " + fmt("%.2fM", ref.params_m),
                  std::abs(params / ref.params_m - 1.0), kParamTolerance, fmt("got %.2fM", params));
    checks.within(ref.variant + " FLOPs within 5% of " + fmt("%.2fB", ref.flops_b) + " at " +
                      std::to_string(ref.resolution),
                  std::abs(flops / ref.flops_b - 1.0), kFlopTolerance, fmt("got %.3fB", flops));
    const std::int64_t p = count_params(spec).total_params();
    increasing = increasing && p > previous;
    previous = p;
  }
  checks.expect("preset params strictly increase Ti < XS < S < B", increasing);
}

void closed_forms(std::uint64_t seed, CheckList& checks) {
  Rng rng(seed);
  for (int i = 0; i < kIdentityCases; ++i) {
    const std::int64_t n = pick(rng, 1, 12544), d = pick(rng, 1, 1024), k = pick(rng, 1, 8);
    const CMTBlockFlops f = analytic_cmt_block(n, d, k);
    checks.expect("block total equals LPU + LMHSA + IRFFN exactly", f.total == f.lpu + f.lmhsa + f.irffn,
                  std::to_string(kIdentityCases) + " random (n,d,k)");
    const Rational expanded =
        Rational(10 * n * d * d + 45 * n * d) + Rational(2 * n * d * d + 2 * n * n * d, k * k);
    checks.expect("block total equals 10nd^2(1+0.2/k^2)+2n^2d/k^2+45nd", f.total == expanded);
    checks.expect("LMHSA closed form equals (2nd^2(k^2+1)+2n^2d)/k^2",
                  f.lmhsa == Rational(2 * n * d * d * (k * k + 1) + 2 * n * n * d, k * k));
    checks.expect("IRFFN closed form equals 8nd^2+36nd", f.irffn == Rational(8 * n * d * d + 36 * n * d));
    checks.expect("LPU closed form equals 9nd", f.lpu == Rational(9 * n * d));
    checks.expect("LMHSA with k=1 equals 4nd^2+2n^2d",
                  analytic_cmt_block(n, d, 1).lmhsa == Rational(4 * n * d * d + 2 * n * n * d));

    checks.expect("transformer block equals MHSA + FFN (d_k=d_v=d, r=4)",
                  analytic_transformer_block(n, d) == analytic_mhsa(n, d, d, d) + analytic_ffn(n, d, 4),
                  std::to_string(kIdentityCases) + " random (n,d)");
    checks.expect("transformer block equals 12nd^2+2n^2d", analytic_transformer_block(n, d) == 12 * n * d * d + 2 * n * n * d);
  }
  checks.expect("transformer block n=196 d=384 = 376,320,000", analytic_transformer_block(196, 384) == 376'320'000);
  checks.expect("transformer block n=1 d=1 = 14", analytic_transformer_block(1, 1) == 14);
}

void reconciliation(std::uint64_t seed, CheckList& checks) {
  Rng rng(seed + 1);
  for (int i = 0; i < 50; ++i) {
    const Index k = pick(rng, 1, 4), heads = pick(rng, 1, 4);
    const Index h = k * pick(rng, 1, 8), w = k * pick(rng, 1, 8), d = heads * pick(rng, 1, 32);
    const StageConfig st{1, d, heads, k, 4.0};
    const auto analytic = analytic_block_parts(h, w, st);
    const auto inst = instrumented_block_parts(h, w, st);
    const ReconcileReport r = reconcile(analytic, inst);
    const std::int64_t n = h * w;
    for (const auto& line : r.lines) {
      if (line.part == "lmhsa") {
        checks.expect("instrumented LMHSA exceeds closed form by the 2nd reduction MACs only",
                      line.deviation == Rational(k > 1 ? 2 * n * d : 0), "50 divisible geometries");
      } else {
        checks.expect("instrumented " + line.part + " equals closed form (r=4, divisible geometry)",
                      line.deviation == Rational(0));
      }
    }
    const ReconcileReport back = reconcile(inst, analytic);
    bool symmetric = back.lines.size() == r.lines.size();
    for (std::size_t j = 0; symmetric && j < r.lines.size(); ++j) {
      symmetric = back.lines[j].deviation == Rational(0) - r.lines[j].deviation;
    }
    checks.expect("reconcile(a,b) deviations = -reconcile(b,a)", symmetric);

    const Index tn = pick(rng, 1, 400), td = pick(rng, 1, 256);
    checks.expect("instrumented transformer block matches 12nd^2+2n^2d exactly",
                  reconcile(analytic_transformer_parts(tn, td), instrumented_transformer_parts(tn, td)).exact());
  }
  {  // CMT-S stage 4 geometry
    const StageConfig st = preset("CMT-S").stages[3];
    const auto inst = instrumented_block_parts(7, 7, st);
    Rational total;
    for (const auto& p : inst) total = total + p.flops;
    checks.expect("n=49 d=512 k=1 block: closed form equals instrumented count",
                  analytic_cmt_block(49, 512, 1).total == total, "total " + to_string(total));
  }
}

void counter_laws(CheckList& checks) {
  for (const auto& name : preset_names()) {
    const ModelSpec spec = preset(name);
    const auto one = count_flops(spec, spec.resolution, 1);
    const auto three = count_flops(spec, spec.resolution, 3);
    checks.expect("FLOPs are linear in batch size", three.total_flops() == 3 * one.total_flops() &&
                                                        three.total_params() == one.total_params());
  }
  const ModelSpec s = preset("CMT-S");
  const auto base = count_flops(s, 224), big = count_flops(s, 448);
  auto conv_flops = [](const CostReport& r) {
    std::int64_t f = 0;
    for (const auto& e : r.entries) {
      if ((e.part == "stem" || e.part == "agg") && e.kind == CostKind::Conv) f += e.flops;
    }
    return f;
  };
  checks.expect("stem/aggregation conv FLOPs at 448 are exactly 4x those at 224",
                conv_flops(big) == 4 * conv_flops(base));
  checks.expect("attention FLOPs grow faster than 4x from 224 to 448",
                big.flops_of(CostKind::Attention) > 4 * base.flops_of(CostKind::Attention));
  bool rejected = false;
  try {
    count_flops(s, 200);
  } catch (const ConfigError&) {
    rejected = true;
  }
  checks.expect("count_flops rejects resolution not divisible by 32", rejected);
}

void scaling(CheckList& checks) {
  checks.within("default alpha*beta^1.5*gamma^2 = 2.352", std::abs(scaling_product(ScalingParams{}) - 2.352), 5e-4);
  for (const auto& name : preset_names()) {
    const ModelSpec spec = preset(name);
    checks.expect("scale(phi=0) is the identity", scale(spec, ScalingParams{}) == spec, name);
    ScalingParams up;
    up.phi = 1;
    const ModelSpec big = scale(spec, up);
    const double ratio = static_cast<double>(count_flops(big, big.resolution).total_flops()) /
                         static_cast<double>(count_flops(spec, spec.resolution).total_flops());
    // The band [2.0, 2.6] as distance outside it.
    const double outside = std::max({0.0, 2.0 - ratio, ratio - 2.6});
    checks.within(name + " phi=1 FLOPs ratio in [2.0, 2.6]", outside, 1e-12, fmt("ratio %.3f", ratio));

    ScalingParams down;
    down.phi = -1;
    const ModelSpec back = scale(big, down);
    bool close = std::abs(back.resolution - spec.resolution) <= 32;
    for (std::size_t i = 0; i < kNumStages; ++i) close = close && std::abs(back.stages[i].depth - spec.stages[i].depth) <= 1;
    checks.expect("scale(phi=1) then scale(phi=-1) within one rounding step", close, name);
  }
  ScalingParams up;
  up.phi = 1;
  const ModelSpec s1 = scale(preset("CMT-S"), up);
  checks.expect("CMT-S phi=1 depths [4,4,19,4], resolution 256",
                s1.stages[0].depth == 4 && s1.stages[1].depth == 4 && s1.stages[2].depth == 19 &&
                    s1.stages[3].depth == 4 && s1.resolution == 256);
}

}  // namespace

SuiteReport cost_suite(const Options& opt) {
  const auto start = std::chrono::steady_clock::now();
  CheckList checks;
  table_totals(checks);
  closed_forms(opt.seed, checks);
  reconciliation(opt.seed, checks);
  counter_laws(checks);
  scaling(checks);
  SuiteReport report{"costs", std::move(checks).take(), 0};
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace cmt::verify
