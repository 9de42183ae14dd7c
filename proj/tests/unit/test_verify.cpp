#include "doctest.h"

#include <algorithm>
#include <set>

#include "json.hpp"

#include "cmt/errors.hpp"
#include "cmt/rng.hpp"
#include "cmt/verify/fixtures.hpp"
#include "cmt/verify/oracle.hpp"
#include "cmt/verify/suites.hpp"

using namespace cmt;

TEST_CASE("oracle hand values") {
  CHECK(oracle::gelu(1.0) == doctest::Approx(0.8413447460685429).epsilon(1e-15));
  CHECK(oracle::gelu(-8.0) == doctest::Approx(-8.0 * 6.220960574271784e-16).epsilon(1e-6));
  CHECK(oracle::matmul(Tensord({2, 2}, {1, 2, 3, 4}), Tensord({2, 1}, {5, 6})) == Tensord({2, 1}, {17, 39}));
  CHECK(oracle::global_avg_pool(Tensord({1, 2, 2, 1}, {1, 2, 3, 4}))[0] == 2.5);
  const Tensord sm = oracle::softmax_rows(Tensord({1, 2}, {0.0, std::log(3.0)}));
  CHECK(sm[0] == doctest::Approx(0.25));
  CHECK(oracle::permute(Tensord({2, 3}, {1, 2, 3, 4, 5, 6}), {1, 0}) == Tensord({3, 2}, {1, 4, 2, 5, 3, 6}));
  // Align-corners resize of a 2-point ramp to 3 points hits the midpoint.
  const Tensord up = oracle::bicubic_resize(Tensord({1, 2}, {0.0, 1.0}), 1, 3);
  CHECK(up[1] == doctest::Approx(0.5));
}

TEST_CASE("the oracle disagrees with a deliberately wrong convolution") {
  Rng rng(3);
  const Tensord x = fixtures::normal<double>({1, 6, 6, 2}, rng);
  ConvWeights<double> w = fixtures::conv<double>(rng, 3, 2, 3, 1, Padding::same(3, 3));
  const Tensord ref = oracle::conv2d(x, w);
  CHECK(rel_error(conv2d(x, w), ref) < 1e-12);
  ConvWeights<double> shifted = w;
  shifted.padding = {0, 2, 0, 2};
  CHECK(rel_error(conv2d(x, shifted), ref) > 1e-2);
}

TEST_CASE("check list keeps the worst value per name") {
  verify::CheckList list;
  list.within("a", 1e-7, 1e-5);
  list.within("a", 3e-6, 1e-5, "case 2");
  list.within("a", 2e-6, 1e-5);
  list.within("b", 1.0, 0.5, "too big");
  list.within("c", std::nan(""), 1.0);
  list.expect("d", true);
  list.expect("d", false, "second");
  list.expect("d", false, "third");
  const auto checks = std::move(list).take();
  REQUIRE(checks.size() == 4);
  CHECK(checks[0].passed);
  CHECK(checks[0].worst == 3e-6);
  CHECK(checks[0].detail == "case 2");
  CHECK_FALSE(checks[1].passed);
  CHECK(checks[1].detail == "too big");
  CHECK_FALSE(checks[2].passed);
  CHECK_FALSE(checks[3].passed);
  CHECK(checks[3].detail == "second");
}

TEST_CASE("reports render one line per check") {
  verify::SuiteReport r{"demo", {{"x", true, 1e-7, 1e-5, ""}, {"y", false, 1.0, 0.0, "why"}}, 0.5};
  const std::string text = r.render();
  CHECK(text.find("PASS  demo/x  worst 1e-07 (tol 1e-05)") != std::string::npos);
  CHECK(text.find("FAIL  demo/y  why") != std::string::npos);
  CHECK(r.failures() == 1);
  const auto j = nlohmann::json::parse(r.to_json());
  CHECK(j["passed"] == false);
  CHECK(j["checks"].size() == 2);
}

TEST_CASE("suite dispatch") {
  CHECK(verify::suite_names() == std::vector<std::string>{"kernels", "blocks", "gradients", "costs"});
  CHECK_THROWS_AS(verify::run("nosuch", {}), ConfigError);
  verify::Options opt;
  opt.kernel_cases = 5;
  const auto reports = verify::run("kernels", opt);
  REQUIRE(reports.size() == 1);
  CHECK(reports[0].suite == "kernels");
  CHECK(reports[0].passed());
}

TEST_CASE("gradient suite with a few seeds") {
  verify::Options opt;
  opt.grad_seeds = 2;
  const auto report = verify::gradient_suite(opt);
  INFO(report.render());
  CHECK(report.passed());
  const bool has_control = std::any_of(report.checks.begin(), report.checks.end(), [](const verify::Check& c) {
    return c.name.find("sign-flipped") != std::string::npos;
  });
  CHECK(has_control);
}

TEST_CASE("cost suite fails exactly on the known table mismatches") {
  const auto report = verify::cost_suite({});
  std::set<std::string> failed;
  for (const auto& c : report.checks) {
    if (!c.passed) failed.insert(c.name);
  }
  INFO(report.render());
  CHECK(failed == std::set<std::string>{"CMT-S params within 3% of 25.14M", "CMT-Ti phi=1 FLOPs ratio in [2.0, 2.6]",
                                        "CMT-XS phi=1 FLOPs ratio in [2.0, 2.6]",
                                        "CMT-S phi=1 FLOPs ratio in [2.0, 2.6]"});
}
