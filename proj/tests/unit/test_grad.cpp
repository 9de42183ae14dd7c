#include "doctest.h"

#include <cmath>

#include "cmt/errors.hpp"
#include "cmt/grad.hpp"
#include "cmt/gradcheck.hpp"
#include "cmt/rng.hpp"
#include "cmt/verify/fixtures.hpp"

using namespace cmt;
namespace fx = cmt::fixtures;

TEST_CASE("matmul vjp is the textbook pair") {
  Rng rng(1);
  const Tensord a = random_normal<double>({4, 3}, rng), b = random_normal<double>({3, 5}, rng);
  const Tensord g = random_normal<double>({4, 5}, rng);
  const auto v = matmul_vjp(a, b, g);
  CHECK(max_abs_diff(v.a, matmul(g, permute(b, {1, 0}))) < 1e-14);
  CHECK(max_abs_diff(v.b, matmul(permute(a, {1, 0}), g)) < 1e-14);
}

TEST_CASE("residual add passes the cotangent to both branches") {
  const GradProblem p = find_grad_op("add").sample(0);
  Rng rng(2);
  const Tensord g = random_normal<double>(p.forward(p.vars).shape(), rng);
  const auto cots = p.vjp(p.vars, g);
  REQUIRE(cots.size() == 2);
  CHECK(cots[0] == g);
  CHECK(cots[1] == g);
}

TEST_CASE("every op passes the central-difference check") {
  for (const auto& name : grad_op_names()) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const GradCheckReport r = finite_diff_check(name, seed);
      CAPTURE(name);
      CAPTURE(seed);
      INFO(r.render());
      CHECK(r.passed());
      CHECK(r.probes() == kGradCheckProbes);
      CHECK(r.max_rel() < kGradCheckThreshold);
    }
  }
}

TEST_CASE("a sign-flipped vjp is rejected") {
  for (const char* name : {"linear", "softmax_rows", "lmhsa", "cmt_block"}) {
    CAPTURE(name);
    CHECK_FALSE(finite_diff_check(sign_flipped(find_grad_op(name)), 0).passed());
  }
}

TEST_CASE("the relative bias receives gradient") {
  const GradProblem p = find_grad_op("lmhsa").sample(4);
  const Tensord y = p.forward(p.vars);
  Rng rng(9);
  const auto cots = p.vjp(p.vars, random_normal<double>(y.shape(), rng));
  bool found = false;
  for (std::size_t i = 0; i < p.vars.size(); ++i) {
    if (p.vars[i].name == "rel_bias") {
      found = true;
      CHECK(cots[i].shape() == p.vars[i].value.shape());
      CHECK(cots[i].array().abs().maxCoeff() > 1e-6);
    }
  }
  CHECK(found);
}

TEST_CASE("inputs that cannot reach the output get exactly zero gradient") {
  Rng rng(3);
  SUBCASE("masked depthwise channel") {
    ConvWeights<double> w = fx::dw<double>(rng, 3, 4, 1, Padding::same(3, 3));
    for (Index i = 2; i < w.kernel.size(); i += 4) w.kernel[i] = 0.0;
    const Tensord x = random_normal<double>({1, 5, 5, 4}, rng);
    const auto v = dwconv2d_vjp(x, w, random_normal<double>({1, 5, 5, 4}, rng));
    for (Index i = 2; i < v.input.size(); i += 4) CHECK(v.input[i] == 0.0);
  }
  SUBCASE("pixels skipped by a strided 1x1 conv") {
    const ConvWeights<double> w = fx::conv<double>(rng, 1, 2, 3, 2, Padding{});
    const Tensord x = random_normal<double>({1, 4, 4, 2}, rng);
    const auto v = conv2d_vjp(x, w, random_normal<double>({1, 2, 2, 3}, rng));
    for (Index r = 0; r < 4; ++r)
      for (Index c = 0; c < 4; ++c)
        if (r % 2 == 1 || c % 2 == 1) {
          CHECK(v.input(0, r, c, 0) == 0.0);
          CHECK(v.input(0, r, c, 1) == 0.0);
        }
  }
}

TEST_CASE("softmax cross-entropy") {
  const CrossEntropy flat = softmax_cross_entropy(Tensord({2, 4}), {0, 3});
  CHECK(flat.loss == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  CHECK(flat.dlogits(0, 0) == doctest::Approx(-0.375));
  CHECK(flat.dlogits(0, 1) == doctest::Approx(0.125));

  Rng rng(5);
  const Tensord logits = random_normal<double>({3, 5}, rng, 3.0);
  const std::vector<Index> labels{1, 4, 0};
  const CrossEntropy ce = softmax_cross_entropy(logits, labels);
  for (Index r = 0; r < 3; ++r) {
    double s = 0;
    for (Index c = 0; c < 5; ++c) s += ce.dlogits(r, c);
    CHECK(std::abs(s) < 1e-14);
  }
  const double eps = 1e-5;
  for (Index i = 0; i < logits.size(); ++i) {
    Tensord up = logits, down = logits;
    up[i] += eps;
    down[i] -= eps;
    const double numeric =
        (softmax_cross_entropy(up, labels).loss - softmax_cross_entropy(down, labels).loss) / (2 * eps);
    CHECK(std::abs(numeric - ce.dlogits[i]) < 1e-8);
  }
  // Extreme logits stay finite.
  const CrossEntropy far = softmax_cross_entropy(Tensord({1, 2}, {0.0, 800.0}), {0});
  CHECK(far.loss == doctest::Approx(800.0));
  CHECK_THROWS_AS(softmax_cross_entropy(logits, {1, 2}), DimensionError);
  CHECK_THROWS_AS(softmax_cross_entropy(logits, {1, 2, 5}), DimensionError);
}

TEST_CASE("report serialization and lookup") {
  const GradCheckReport r = finite_diff_check("gelu", 1);
  CHECK(r.render().find("gelu") != std::string::npos);
  CHECK(r.to_json().find("\"max_rel\"") != std::string::npos);
  CHECK_THROWS_AS(find_grad_op("nosuch"), ConfigError);
  CHECK_THROWS_AS(finite_diff_check("nosuch", 0), ConfigError);
  CHECK(grad_op_names().size() == grad_ops().size());
}
