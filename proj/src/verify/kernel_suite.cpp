#include <chrono>
#include <cmath>
#include <numeric>

#include "cmt/kernels.hpp"
#include "cmt/verify/fixtures.hpp"
#include "cmt/verify/oracle.hpp"
#include "cmt/verify/suites.hpp"

namespace cmt::verify {

namespace {

using fixtures::pick;

constexpr double kOracleTol = 1e-5;

template <typename P>
double oracle_error(const Tensorf& got, const Tensord& ref, CheckList& checks, const std::string& op,
                    const P& describe) {
  const double err = rel_error(got, ref);
  checks.within(op + " vs 64-bit oracle", err, kOracleTol, describe());
  checks.expect(op + " output finite", all_finite(got));
  return err;
}

Padding random_padding(Rng& rng, Index k) {
  return {pick(rng, 0, k - 1), pick(rng, 0, k - 1), pick(rng, 0, k - 1), pick(rng, 0, k - 1)};
}

void one_case(std::uint64_t seed, CheckList& checks) {
  Rng rng(seed);
  auto shape_note = [](const Shape& s) { return [s] { return "at " + to_string(s); }; };

  {  // matmul
    const Index r = pick(rng, 1, 16), k = pick(rng, 1, 16), c = pick(rng, 1, 16);
    auto a = fixtures::normal<float>({r, k}, rng), b = fixtures::normal<float>({k, c}, rng);
    oracle_error(matmul(a, b), oracle::matmul(a.cast<double>(), b.cast<double>()), checks, "matmul",
                 shape_note({r, k, c}));
  }
  {  // linear over a leading batch
    const Index n = pick(rng, 1, 4), rows = pick(rng, 1, 16), din = pick(rng, 1, 16), dout = pick(rng, 1, 16);
    auto x = fixtures::normal<float>({n, rows, din}, rng);
    Rng pr(rng.engine()());
    Rng pr2 = pr;
    auto pf = fixtures::linear<float>(pr, din, dout);
    auto pd = fixtures::linear<double>(pr2, din, dout);
    oracle_error(linear(x, pf), oracle::linear(x.cast<double>(), pd), checks, "linear",
                 shape_note({n, rows, din, dout}));
  }
  {  // conv2d
    const Index k = pick(rng, 1, 4), stride = pick(rng, 1, 3);
    const Padding pad = random_padding(rng, k);
    const Index n = pick(rng, 1, 2), h = pick(rng, k, 16), w = pick(rng, k, 16);
    const Index cin = pick(rng, 1, 16), cout = pick(rng, 1, 16);
    auto x = fixtures::normal<float>({n, h, w, cin}, rng);
    Rng pr(rng.engine()());
    Rng pr2 = pr;
    auto wf = fixtures::conv<float>(pr, k, cin, cout, stride, pad);
    auto wd = fixtures::conv<double>(pr2, k, cin, cout, stride, pad);
    oracle_error(conv2d(x, wf), oracle::conv2d(x.cast<double>(), wd), checks, "conv2d",
                 shape_note({n, h, w, cin, cout, k, stride}));
  }
  {  // dwconv2d
    const Index k = pick(rng, 1, 5), stride = pick(rng, 1, 3);
    const Padding pad = random_padding(rng, k);
    const Index n = pick(rng, 1, 2), h = pick(rng, k, 16), w = pick(rng, k, 16), c = pick(rng, 1, 16);
    auto x = fixtures::normal<float>({n, h, w, c}, rng);
    Rng pr(rng.engine()());
    Rng pr2 = pr;
    auto wf = fixtures::dw<float>(pr, k, c, stride, pad);
    auto wd = fixtures::dw<double>(pr2, k, c, stride, pad);
    oracle_error(dwconv2d(x, wf), oracle::dwconv2d(x.cast<double>(), wd), checks, "dwconv2d",
                 shape_note({n, h, w, c, k, stride}));

    // Delta kernel, same padding: identity.
    ConvWeights<float> delta{Tensorf({3, 3, c}), Tensorf({c}), 1, Padding::same(3, 3)};
    for (Index ch = 0; ch < c; ++ch) delta.kernel(1, 1, ch) = 1.0f;
    if (h >= 3 && w >= 3) checks.within("dwconv2d delta kernel is identity", max_abs_diff(dwconv2d(x, delta), x), 1e-7);
  }
  {  // softmax
    const Index r = pick(rng, 1, 16), c = pick(rng, 1, 16);
    const double scale = rng.uniform(0.1, 10.0);
    auto x = fixtures::normal<float>({r, c}, rng, scale);
    const Tensorf y = softmax_rows(x);
    oracle_error(y, oracle::softmax_rows(x.cast<double>()), checks, "softmax_rows", shape_note({r, c}));
    double worst = 0;
    for (Index i = 0; i < r; ++i) {
      double s = 0;
      for (Index j = 0; j < c; ++j) s += y(i, j);
      worst = std::max(worst, std::abs(s - 1.0));
    }
    checks.within("softmax rows sum to 1", worst, 1e-6);
    Tensorf shifted = x;
    for (Index i = 0; i < r; ++i) {
      const auto shift = static_cast<float>(rng.uniform(-20.0, 20.0));
      for (Index j = 0; j < c; ++j) shifted(i, j) += shift;
    }
    checks.within("softmax invariant to row shift", max_abs_diff(softmax_rows(shifted), y), 1e-6);
  }
  {  // gelu
    Shape s{pick(rng, 1, 16), pick(rng, 1, 16)};
    auto x = fixtures::normal<float>(s, rng, 3.0);
    oracle_error(gelu(x), oracle::gelu(x.cast<double>()), checks, "gelu", shape_note(s));
  }
  {  // layer_norm
    const Index r = pick(rng, 1, 16), d = pick(rng, 2, 16);
    auto x = fixtures::normal<float>({r, d}, rng, rng.uniform(0.5, 4.0));
    Rng pr(rng.engine()());
    Rng pr2 = pr;
    auto pf = fixtures::layer_norm<float>(pr, d);
    auto pd = fixtures::layer_norm<double>(pr2, d);
    oracle_error(layer_norm(x, pf), oracle::layer_norm(x.cast<double>(), pd), checks, "layer_norm",
                 shape_note({r, d}));

    // Moments with gamma = 1, beta = 0: mean 0, variance var / (var + eps).
    LayerNormParams<float> unit{Tensorf({d}, 1.0f), Tensorf({d}, 0.0f)};
    const Tensorf y = layer_norm(x, unit);
    double mean_err = 0, var_err = 0;
    for (Index i = 0; i < r; ++i) {
      double mx = 0, vx = 0, my = 0, vy = 0;
      for (Index j = 0; j < d; ++j) mx += x(i, j), my += y(i, j);
      mx /= static_cast<double>(d);
      my /= static_cast<double>(d);
      for (Index j = 0; j < d; ++j) {
        vx += (x(i, j) - mx) * (x(i, j) - mx);
        vy += (y(i, j) - my) * (y(i, j) - my);
      }
      vx /= static_cast<double>(d);
      vy /= static_cast<double>(d);
      mean_err = std::max(mean_err, std::abs(my));
      var_err = std::max(var_err, std::abs(vy - vx / (vx + kDefaultEps)));
    }
    checks.within("layer_norm output mean 0", mean_err, 1e-5);
    checks.within("layer_norm output variance var/(var+eps)", var_err, 1e-5);
  }
  {  // batch_norm_infer
    Shape s{pick(rng, 1, 2), pick(rng, 1, 8), pick(rng, 1, 8), pick(rng, 1, 16)};
    auto x = fixtures::normal<float>(s, rng);
    Rng pr(rng.engine()());
    Rng pr2 = pr;
    auto pf = fixtures::batch_norm<float>(pr, s[3]);
    auto pd = fixtures::batch_norm<double>(pr2, s[3]);
    oracle_error(batch_norm_infer(x, pf), oracle::batch_norm(x.cast<double>(), pd), checks,
                 "batch_norm_infer", shape_note(s));
  }
  {  // global_avg_pool
    Shape s{pick(rng, 1, 3), pick(rng, 1, 16), pick(rng, 1, 16), pick(rng, 1, 16)};
    auto x = fixtures::normal<float>(s, rng);
    oracle_error(global_avg_pool(x), oracle::global_avg_pool(x.cast<double>()), checks, "global_avg_pool",
                 shape_note(s));
  }
  {  // bicubic_resize
    const Index h = pick(rng, 1, 16), w = pick(rng, 1, 16), oh = pick(rng, 1, 16), ow = pick(rng, 1, 16);
    auto m = fixtures::normal<float>({h, w}, rng);
    oracle_error(bicubic_resize(m, oh, ow), oracle::bicubic_resize(m.cast<double>(), oh, ow), checks,
                 "bicubic_resize", shape_note({h, w, oh, ow}));
    checks.within("bicubic same-size resize is identity", max_abs_diff(bicubic_resize(m, h, w), m), 1e-6);
    const auto c = static_cast<float>(rng.uniform(-5.0, 5.0));
    const Tensorf constant({h, w}, c);
    checks.within("bicubic preserves constants", max_abs_diff(bicubic_resize(constant, oh, ow), Tensorf({oh, ow}, c)),
                  1e-6);
  }
  {  // permute
    const Index rank = pick(rng, 1, 4);
    Shape s;
    for (Index i = 0; i < rank; ++i) s.push_back(pick(rng, 1, 6));
    std::vector<Index> axes(static_cast<std::size_t>(rank));
    std::iota(axes.begin(), axes.end(), 0);
    for (std::size_t i = axes.size(); i > 1; --i) std::swap(axes[i - 1], axes[static_cast<std::size_t>(rng.below(static_cast<Index>(i)))]);
    auto x = fixtures::normal<float>(s, rng);
    const Tensorf y = permute(x, axes);
    checks.within("permute vs index-arithmetic oracle", rel_error(y, oracle::permute(x.cast<double>(), axes)), kOracleTol,
                  "at " + to_string(s));
    checks.expect("permute round trip is exact", permute(y, inverse_permutation(axes)) == x);
    checks.expect("reshape round trip is exact", x.reshaped({x.size()}).reshaped(s) == x);
  }
}

void hand_examples(CheckList& checks) {
  const Tensorf a({2, 2}, std::vector<float>{1, 2, 3, 4}), b({2, 1}, std::vector<float>{5, 6});
  checks.expect("matmul [[1,2],[3,4]]x[[5],[6]] = [[17],[39]]", matmul(a, b) == Tensorf({2, 1}, std::vector<float>{17, 39}));
  const Tensorf big = softmax_rows(Tensorf({1, 2}, std::vector<float>{0, 1000}));
  checks.expect("softmax [0,1000] is finite and ~[0,1]", all_finite(big) && big[0] < 1e-30f && std::abs(big[1] - 1.0f) < 1e-7f);
  checks.within("gelu(10) = 10", std::abs(gelu(Tensorf({1}, 10.0f))[0] - 10.0), 1e-6);
  checks.expect("gelu(0) = 0", gelu(Tensorf({1}, 0.0f))[0] == 0.0f);
  checks.within("gelu(1) vs erf oracle", std::abs(gelu(Tensorf({1}, 1.0f))[0] - oracle::gelu(1.0)), 1e-7);
  checks.expect("global_avg_pool [1,2,3,4] = 2.5",
                global_avg_pool(Tensorf({1, 2, 2, 1}, std::vector<float>{1, 2, 3, 4}))[0] == 2.5f);
}

}  // namespace

SuiteReport kernel_suite(const Options& opt) {
  const auto start = std::chrono::steady_clock::now();
  CheckList checks;
  for (int c = 0; c < opt.kernel_cases; ++c) one_case(opt.seed * 1000003ULL + static_cast<std::uint64_t>(c), checks);
  hand_examples(checks);
  SuiteReport report{"kernels", std::move(checks).take(), 0};
  for (auto& c : report.checks) {
    if (c.name.ends_with("vs 64-bit oracle")) {
      c.detail = std::to_string(opt.kernel_cases) + " random shapes, worst " + c.detail;
    }
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace cmt::verify
