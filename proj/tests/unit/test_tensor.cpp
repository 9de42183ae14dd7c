#include "doctest.h"

#include "cmt/errors.hpp"
#include "cmt/rng.hpp"
#include "cmt/tensor.hpp"

using namespace cmt;

TEST_CASE("extents multiply to the data length") {
  const Tensorf t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.rank() == 3);
  CHECK(t.dim(-1) == 4);
  CHECK_THROWS_AS(Tensorf({2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensorf({2, 2}, std::vector<float>(3)), DimensionError);
}

TEST_CASE("row-major element access") {
  Tensord t({2, 3});
  for (Index i = 0; i < 6; ++i) t[i] = static_cast<double>(i);
  CHECK(t(1, 2) == 5.0);
  CHECK(t(0, 1) == 1.0);
  CHECK(t.rows()(1, 0) == 3.0);
}

TEST_CASE("permute 2x3 and back") {
  const Tensorf x({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  const Tensorf y = permute(x, {1, 0});
  CHECK(y.shape() == Shape{3, 2});
  CHECK(y == Tensorf({3, 2}, std::vector<float>{1, 4, 2, 5, 3, 6}));
  CHECK(permute(y, {1, 0}) == x);
}

TEST_CASE("token view reshape round trip") {
  Rng rng(3);
  const Tensorf x = random_normal<float>({1, 4, 4, 8}, rng);
  const Tensorf tokens = x.reshaped({16, 8});
  CHECK(tokens.shape() == Shape{16, 8});
  CHECK(tokens.reshaped({1, 4, 4, 8}) == x);
  CHECK_THROWS_AS(x.reshaped({15, 8}), DimensionError);
}

TEST_CASE("random permutations invert") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensord x = random_normal<double>({2, 3, 4, 5}, rng);
    std::vector<Index> axes{0, 1, 2, 3};
    for (std::size_t i = 4; i > 1; --i) std::swap(axes[i - 1], axes[static_cast<std::size_t>(rng.below(static_cast<Index>(i)))]);
    CHECK(permute(permute(x, axes), inverse_permutation(axes)) == x);
  }
}

TEST_CASE("invalid permutations are rejected") {
  const Tensorf x({2, 3});
  CHECK_THROWS_AS(permute(x, {0}), DimensionError);
  CHECK_THROWS_AS(permute(x, {0, 0}), DimensionError);
  CHECK_THROWS_AS(permute(x, {0, 2}), DimensionError);
}

TEST_CASE("elementwise add checks shapes") {
  const Tensorf a({2, 2}, 1.0f), b({2, 2}, 2.0f);
  CHECK((a + b) == Tensorf({2, 2}, 3.0f));
  CHECK_THROWS_AS(a + Tensorf({4}), DimensionError);
}

TEST_CASE("error metrics") {
  const Tensord ref({3}, std::vector<double>{1.0, -4.0, 0.0});
  const Tensord got({3}, std::vector<double>{1.0, -4.0, 0.004});
  CHECK(rel_error(got, ref) == doctest::Approx(0.001));
  CHECK(max_abs_diff(got, ref) == doctest::Approx(0.004));
  CHECK(all_finite(got));
  Tensord bad = got;
  bad[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(all_finite(bad));
}

TEST_CASE("rng is reproducible and truncated normal respects its bound") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());
  Rng r(1);
  for (int i = 0; i < 10000; ++i) CHECK(std::abs(r.trunc_normal(0.02)) <= 0.04);
}
