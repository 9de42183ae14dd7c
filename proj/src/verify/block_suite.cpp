#include <chrono>
#include <cmath>

#include "cmt/blocks.hpp"
#include "cmt/model.hpp"
#include "cmt/verify/fixtures.hpp"
#include "cmt/verify/oracle.hpp"
#include "cmt/verify/suites.hpp"

namespace cmt::verify {

namespace {

using fixtures::pick;

constexpr double kFloatTol = 1e-4;
constexpr double kDoubleTol = 1e-10;
constexpr double kIdentityTol = 1e-6;

// Builds the same fixture in float and double from one seed and compares both
// precisions of the library against the oracle.
template <typename MakeF, typename MakeD, typename RunF, typename RunD, typename Ref>
void compare(CheckList& checks, const std::string& op, std::uint64_t seed, MakeF make_f, MakeD make_d,
             RunF run_f, RunD run_d, Ref ref) {
  Rng rf(seed), rd(seed);
  auto pf = make_f(rf);
  auto pd = make_d(rd);
  const Tensorf yf = run_f(pf);
  const Tensord yd = run_d(pd);
  const Tensord expect = ref(pd);
  const std::string where = "worst at seed " + std::to_string(seed);
  checks.within(op + " (f32) vs 64-bit oracle", rel_error(yf, expect), kFloatTol, where);
  checks.within(op + " (f64) vs 64-bit oracle", rel_error(yd, expect), kDoubleTol, where);
  checks.expect(op + " output finite", all_finite(yf));
}

template <typename S>
struct Geometry {
  Tensor<S> x;
  Index d, heads, k, hidden;
};

template <typename S>
Geometry<S> geometry(Rng& rng) {
  const Index heads = pick(rng, 1, 3), d = heads * pick(rng, 1, 4), k = pick(rng, 1, 3);
  const Index h = pick(rng, 1, 7), w = pick(rng, 1, 7);
  return {fixtures::normal<S>({pick(rng, 1, 2), h, w, d}, rng), d, heads, k, pick(rng, 1, 3) * d};
}

template <typename S>
Tensor<S> bias_for(Rng& rng, const Geometry<S>& g) {
  const Index n = g.x.dim(1) * g.x.dim(2);
  const Index m = reduced_extent(g.x.dim(1), g.k) * reduced_extent(g.x.dim(2), g.k);
  return fixtures::normal<S>({g.heads, n, m}, rng, 0.5);
}

void random_blocks(std::uint64_t seed, CheckList& checks) {
  compare(
      checks, "lpu", seed,
      [](Rng& r) { auto g = geometry<float>(r); return std::pair{fixtures::dw<float>(r, 3, g.d, 1, Padding::same(3, 3)), g.x}; },
      [](Rng& r) { auto g = geometry<double>(r); return std::pair{fixtures::dw<double>(r, 3, g.d, 1, Padding::same(3, 3)), g.x}; },
      [](const auto& p) { return lpu_forward(LPUParams<float>{p.first}, p.second); },
      [](const auto& p) { return lpu_forward(LPUParams<double>{p.first}, p.second); },
      [](const auto& p) { return oracle::lpu(LPUParams<double>{p.first}, p.second); });

  compare(
      checks, "attention_baseline", seed,
      [](Rng& r) {
        const Index n = pick(r, 1, 9), m = pick(r, 1, 9), dk = pick(r, 1, 8), dv = pick(r, 1, 8);
        return std::tuple{fixtures::normal<float>({n, dk}, r), fixtures::normal<float>({m, dk}, r), fixtures::normal<float>({m, dv}, r)};
      },
      [](Rng& r) {
        const Index n = pick(r, 1, 9), m = pick(r, 1, 9), dk = pick(r, 1, 8), dv = pick(r, 1, 8);
        return std::tuple{fixtures::normal<double>({n, dk}, r), fixtures::normal<double>({m, dk}, r), fixtures::normal<double>({m, dv}, r)};
      },
      [](const auto& p) { return attention_baseline(std::get<0>(p), std::get<1>(p), std::get<2>(p)); },
      [](const auto& p) { return attention_baseline(std::get<0>(p), std::get<1>(p), std::get<2>(p)); },
      [](const auto& p) { return oracle::attention(std::get<0>(p), std::get<1>(p), std::get<2>(p)); });

  auto make_lmhsa = [](auto tag) {
    using S = decltype(tag);
    return [](Rng& r) {
      auto g = geometry<S>(r);
      auto p = fixtures::lmhsa<S>(r, g.d, g.heads, g.k);
      auto b = bias_for(r, g);
      return std::tuple{p, b, g.x};
    };
  };
  compare(
      checks, "lmhsa", seed, make_lmhsa(float{}), make_lmhsa(double{}),
      [](const auto& p) { return lmhsa_forward(std::get<0>(p), std::get<1>(p), std::get<2>(p)); },
      [](const auto& p) { return lmhsa_forward(std::get<0>(p), std::get<1>(p), std::get<2>(p)); },
      [](const auto& p) { return oracle::lmhsa(std::get<0>(p), std::get<1>(p), std::get<2>(p)); });

  auto make_ffn = [](auto tag) {
    using S = decltype(tag);
    return [](Rng& r) {
      auto g = geometry<S>(r);
      return std::pair{FFNParams<S>{fixtures::linear<S>(r, g.d, g.hidden), fixtures::linear<S>(r, g.hidden, g.d)}, g.x};
    };
  };
  compare(
      checks, "ffn_baseline", seed, make_ffn(float{}), make_ffn(double{}),
      [](const auto& p) { return ffn_baseline(p.first, p.second); },
      [](const auto& p) { return ffn_baseline(p.first, p.second); },
      [](const auto& p) { return oracle::ffn(p.first, p.second); });

  auto make_irffn = [](auto tag) {
    using S = decltype(tag);
    return [](Rng& r) {
      auto g = geometry<S>(r);
      return std::pair{fixtures::irffn<S>(r, g.d, g.hidden), g.x};
    };
  };
  compare(
      checks, "irffn", seed, make_irffn(float{}), make_irffn(double{}),
      [](const auto& p) { return irffn_forward(p.first, p.second); },
      [](const auto& p) { return irffn_forward(p.first, p.second); },
      [](const auto& p) { return oracle::irffn(p.first, p.second); });

  auto make_block = [](auto tag) {
    using S = decltype(tag);
    return [](Rng& r) {
      auto g = geometry<S>(r);
      auto p = fixtures::block<S>(r, g.d, g.heads, g.k, g.hidden);
      auto b = bias_for(r, g);
      return std::tuple{p, b, g.x};
    };
  };
  compare(
      checks, "cmt_block", seed, make_block(float{}), make_block(double{}),
      [](const auto& p) { return cmt_block_forward(std::get<0>(p), std::get<1>(p), std::get<2>(p)); },
      [](const auto& p) { return cmt_block_forward(std::get<0>(p), std::get<1>(p), std::get<2>(p)); },
      [](const auto& p) { return oracle::cmt_block(std::get<0>(p), std::get<1>(p), std::get<2>(p)); });

  auto make_stem = [](auto tag) {
    using S = decltype(tag);
    return [](Rng& r) {
      const Index c = pick(r, 1, 8), h = 2 * pick(r, 1, 6), w = 2 * pick(r, 1, 6);
      auto x = fixtures::normal<S>({pick(r, 1, 2), h, w, 3}, r);
      return std::pair{fixtures::stem<S>(r, c), x};
    };
  };
  compare(
      checks, "stem", seed, make_stem(float{}), make_stem(double{}),
      [](const auto& p) { return stem_forward(p.first, p.second); },
      [](const auto& p) { return stem_forward(p.first, p.second); },
      [](const auto& p) { return oracle::stem(p.first, p.second); });

  auto make_agg = [](auto tag) {
    using S = decltype(tag);
    return [](Rng& r) {
      const Index cin = pick(r, 1, 8), cout = pick(r, 2, 12), h = 2 * pick(r, 1, 6), w = 2 * pick(r, 1, 6);
      auto x = fixtures::normal<S>({pick(r, 1, 2), h, w, cin}, r);
      return std::pair{fixtures::patch_agg<S>(r, cin, cout), x};
    };
  };
  compare(
      checks, "patch_agg", seed, make_agg(float{}), make_agg(double{}),
      [](const auto& p) { return patch_agg_forward(p.first, p.second); },
      [](const auto& p) { return patch_agg_forward(p.first, p.second); },
      [](const auto& p) { return oracle::patch_agg(p.first, p.second); });
}

// Model forward against the oracle on the toy geometry with perturbed weights.
void toy_model(std::uint64_t seed, CheckList& checks) {
  ModelSpec spec;
  spec.name = "toy";
  spec.stem_channels = 8;
  const Index dims[4] = {8, 16, 32, 64}, heads[4] = {1, 2, 4, 8}, red[4] = {8, 4, 2, 1};
  for (std::size_t i = 0; i < kNumStages; ++i) spec.stages[i] = {1, dims[i], heads[i], red[i], 4.0};
  spec.resolution = 32;
  spec.head_width = 32;
  spec.num_classes = 5;

  ModelT<double> md = build<double>(spec, seed);
  Rng rng(seed + 17);
  visit_model(md, [&](const std::string& name, Tensord& t, bool) {
    const bool var = name.ends_with("running_var");
    for (auto& v : t.values()) {
      v = var ? static_cast<float>(rng.uniform(0.5, 2.0)) : static_cast<float>(v + 0.2 * rng.normal());
    }
  });
  const ModelT<float> mf = cast_model<float>(md);
  const Tensorf x = fixtures::normal<float>({2, 32, 32, 3}, rng);
  const Tensord expect = oracle::model_logits(md, x.cast<double>());
  checks.within("toy model logits (f32) vs 64-bit oracle", rel_error(forward(mf, x).logits, expect), kFloatTol);
  checks.within("toy model logits (f64) vs 64-bit oracle", rel_error(forward(md, x.cast<double>()).logits, expect),
                kDoubleTol);
}

void zero_lmhsa(LMHSAParams<float>& p) {
  auto zero = [](Tensorf& t) { t.array() = 0.0f; };
  for (auto* l : {&p.q, &p.k, &p.v, &p.o}) zero(l->weight), zero(l->bias);
  for (auto* c : {&p.dw_k, &p.dw_v}) {
    if (!c->kernel.empty()) zero(c->kernel), zero(c->bias);
  }
}

void identities(std::uint64_t seed, CheckList& checks) {
  Rng rng(seed);
  const Index n = 1 + rng.below(2), h = pick(rng, 1, 7), w = pick(rng, 1, 7), d = pick(rng, 1, 12);
  const Tensorf x = fixtures::normal<float>({n, h, w, d}, rng);

  {  // LMHSA(k=1, B=0, h=1, W_o = I) equals the baseline on the same projections.
    auto p = fixtures::lmhsa<float>(rng, d, 1, 1);
    p.o.weight = Tensorf({d, d});
    p.o.bias = Tensorf({d});
    for (Index i = 0; i < d; ++i) p.o.weight(i, i) = 1.0f;
    const Tensorf y = lmhsa_forward(p, Tensorf{}, x);
    double worst = 0;
    for (Index b = 0; b < n; ++b) {
      Tensorf tokens({h * w, d});
      std::copy_n(x.data() + b * h * w * d, h * w * d, tokens.data());
      const Tensorf base = attention_baseline(linear(tokens, p.q), linear(tokens, p.k), linear(tokens, p.v));
      Tensorf got({h * w, d});
      std::copy_n(y.data() + b * h * w * d, h * w * d, got.data());
      worst = std::max(worst, static_cast<double>(max_abs_diff(got, base)));
    }
    checks.within("lmhsa(k=1, B=0, h=1) equals baseline attention", worst, kIdentityTol);
  }

  const Index heads = pick(rng, 1, 3), dh = pick(rng, 1, 4), k = pick(rng, 1, 3);
  const Index dm = heads * dh;
  const Tensorf xm = fixtures::normal<float>({n, h, w, dm}, rng);
  auto block = fixtures::block<float>(rng, dm, heads, k, 4 * dm);
  const Index tokens = h * w, m = reduced_extent(h, k) * reduced_extent(w, k);
  const Tensorf bias = fixtures::normal<float>({heads, tokens, m}, rng, 0.5);

  {  // attention rows sum to one, every head
    BlockTrace<float> trace;
    cmt_block_forward(block, bias, xm, &trace);
    double worst = 0;
    for (const auto& wts : trace.attention.weights) {
      for (Index r = 0; r < wts.dim(0); ++r) worst = std::max(worst, std::abs(wts.rows().row(r).cast<double>().sum() - 1.0));
    }
    checks.within("attention rows sum to 1 for every head", worst, kIdentityTol);
    checks.expect("trace holds one weight map per (sample, head)",
                  static_cast<Index>(trace.attention.weights.size()) == n * heads);
  }
  {  // determinism
    checks.expect("block forward is bitwise deterministic",
                  cmt_block_forward(block, bias, xm) == cmt_block_forward(block, bias, xm));
  }
  {  // zeroed LPU is the identity
    LPUParams<float> lpu{fixtures::dw<float>(rng, 3, dm, 1, Padding::same(3, 3))};
    lpu.dw.kernel.array() = 0.0f;
    lpu.dw.bias.array() = 0.0f;
    checks.within("zeroed lpu is identity", max_abs_diff(lpu_forward(lpu, xm), xm), kIdentityTol);
    lpu.dw.kernel = Tensorf({3, 3, dm});
    for (Index c = 0; c < dm; ++c) lpu.dw.kernel(1, 1, c) = 1.0f;
    Tensorf twice = xm;
    twice.array() *= 2.0f;
    checks.within("delta lpu doubles its input", max_abs_diff(lpu_forward(lpu, xm), twice), kIdentityTol);
  }
  {  // IRFFN with a zero depthwise kernel collapses to the pointwise chain
    auto p = block.ffn;
    p.dw.kernel.array() = 0.0f;
    p.dw.bias.array() = 0.0f;
    const Tensorf expect =
        batch_norm_infer(linear(batch_norm_infer(gelu(batch_norm_infer(gelu(linear(xm, p.expand)), p.bn1)), p.bn2),
                                p.project),
                         p.bn3);
    checks.within("irffn with zero dw reduces to pointwise FFN", max_abs_diff(irffn_forward(p, xm), expect),
                  kIdentityTol);
  }
  {  // fully zeroed block is the identity
    auto z = block;
    z.lpu.dw.kernel.array() = 0.0f;
    z.lpu.dw.bias.array() = 0.0f;
    zero_lmhsa(z.attn);
    for (auto* ln : {&z.ln1, &z.ln2}) ln->gamma.array() = 1.0f, ln->beta.array() = 0.0f;
    for (auto* l : {&z.ffn.expand, &z.ffn.project}) l->weight.array() = 0.0f, l->bias.array() = 0.0f;
    z.ffn.dw.kernel.array() = 0.0f;
    z.ffn.dw.bias.array() = 0.0f;
    for (auto* bn : {&z.ffn.bn1, &z.ffn.bn2, &z.ffn.bn3}) {
      bn->gamma.array() = 1.0f, bn->beta.array() = 0.0f, bn->running_mean.array() = 0.0f, bn->running_var.array() = 1.0f;
    }
    checks.within("zeroed cmt block is identity", max_abs_diff(cmt_block_forward(z, Tensorf{}, xm), xm), kIdentityTol);
  }
  {  // constant tokens, B = 0: constant output
    Tensorf c({n, h, w, dm});
    for (Index i = 0; i < c.size(); ++i) c[i] = static_cast<float>(std::sin(0.7 * static_cast<double>(i % dm) + 0.3));
    const Tensorf y = lmhsa_forward(block.attn, Tensorf{}, c);
    double worst = 0;
    for (Index i = 0; i < y.size(); ++i) worst = std::max(worst, static_cast<double>(std::abs(y[i] - y[i % dm + (i / (h * w * dm)) * h * w * dm])));
    // Zero-padded trailing windows see fewer taps; only divisible geometry is constant.
    if (h % k == 0 && w % k == 0) checks.within("lmhsa of constant tokens (B=0) is constant", worst, kIdentityTol);
  }
}

void table_geometry(std::uint64_t seed, CheckList& checks, bool preset_forwards) {
  Rng rng(seed);
  {
    auto p = fixtures::block<float>(rng, 256, 4, 2, 1024);
    const Tensorf x = fixtures::normal<float>({1, 14, 14, 256}, rng);
    const Tensorf bias = fixtures::normal<float>({4, 196, 49}, rng, 0.02);
    checks.expect("cmt block 1x14x14x256 preserves shape",
                  cmt_block_forward(p, bias, x).shape() == Shape{1, 14, 14, 256});
  }
  {
    auto s = fixtures::stem<float>(rng, 32);
    checks.expect("CMT-S stem 224 -> 112x112x32",
                  stem_forward(s, fixtures::normal<float>({1, 224, 224, 3}, rng)).shape() == Shape{1, 112, 112, 32});
    auto t = fixtures::stem<float>(rng, 16);
    checks.expect("CMT-Ti stem 160 -> 80x80x16",
                  stem_forward(t, fixtures::normal<float>({1, 160, 160, 3}, rng)).shape() == Shape{1, 80, 80, 16});
    auto a1 = fixtures::patch_agg<float>(rng, 32, 64);
    checks.expect("CMT-S stage-1 aggregation 112x112x32 -> 56x56x64",
                  patch_agg_forward(a1, fixtures::normal<float>({1, 112, 112, 32}, rng)).shape() == Shape{1, 56, 56, 64});
    auto a4 = fixtures::patch_agg<float>(rng, 256, 512);
    checks.expect("CMT-S stage-4 aggregation 14x14x256 -> 7x7x512",
                  patch_agg_forward(a4, fixtures::normal<float>({1, 14, 14, 256}, rng)).shape() == Shape{1, 7, 7, 512});
  }
  if (!preset_forwards) return;
  for (const auto& name : preset_names()) {
    const ModelSpec spec = preset(name);
    const Model model = build<float>(spec, seed);
    const Tensorf x = fixtures::normal<float>({1, spec.resolution, spec.resolution, 3}, rng);
    const auto out = forward(model, x);
    bool ok = out.logits.shape() == Shape{1, spec.num_classes} && all_finite(out.logits);
    std::string strides;
    for (std::size_t i = 0; i < kNumStages; ++i) {
      const auto& f = out.pyramid[i];
      const Index stride = spec.resolution / f.dim(1);
      ok = ok && f.dim(1) * stride == spec.resolution && f.dim(2) == f.dim(1) && stride == (Index{4} << i) &&
           f.dim(3) == spec.stages[i].dim;
      strides += (i ? "," : "") + std::to_string(stride);
    }
    checks.expect(name + " pyramid strides [4,8,16,32]", ok, "strides [" + strides + "]");
  }
}

}  // namespace

SuiteReport block_suite(const Options& opt) {
  const auto start = std::chrono::steady_clock::now();
  CheckList checks;
  for (int c = 0; c < opt.block_cases; ++c) {
    const std::uint64_t seed = opt.seed * 7919ULL + static_cast<std::uint64_t>(c);
    random_blocks(seed, checks);
    identities(seed, checks);
  }
  toy_model(opt.seed, checks);
  table_geometry(opt.seed, checks, opt.preset_forwards);
  SuiteReport report{"blocks", std::move(checks).take(), 0};
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace cmt::verify
