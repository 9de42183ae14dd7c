#include "doctest.h"

#include <fstream>

#include "cmt/errors.hpp"
#include "cmt/spec.hpp"
#include "support.hpp"

using namespace cmt;

namespace {

std::array<Index, 4> depths(const ModelSpec& s) {
  return {s.stages[0].depth, s.stages[1].depth, s.stages[2].depth, s.stages[3].depth};
}

std::array<Index, 4> dims(const ModelSpec& s) {
  return {s.stages[0].dim, s.stages[1].dim, s.stages[2].dim, s.stages[3].dim};
}

}  // namespace

TEST_CASE("presets are the literal table configurations") {
  const ModelSpec s = preset("CMT-S");
  CHECK(depths(s) == std::array<Index, 4>{3, 3, 16, 3});
  CHECK(dims(s) == std::array<Index, 4>{64, 128, 256, 512});
  CHECK(s.stages[0].expansion == 4.0);
  CHECK(s.resolution == 224);
  CHECK(s.stem_channels == 32);

  const ModelSpec ti = preset("CMT-Ti");
  CHECK(dims(ti) == std::array<Index, 4>{46, 92, 184, 368});
  CHECK(ti.stages[3].expansion == 3.6);
  CHECK(ti.resolution == 160);
  CHECK(ti.stem_channels == 16);

  const ModelSpec b = preset("CMT-B");
  CHECK(depths(b) == std::array<Index, 4>{4, 4, 20, 4});
  CHECK(dims(b) == std::array<Index, 4>{76, 152, 304, 608});
  CHECK(b.stem_channels == 38);
  CHECK(b.resolution == 256);

  const ModelSpec xs = preset("CMT-XS");
  CHECK(depths(xs) == std::array<Index, 4>{3, 3, 12, 3});
  CHECK(xs.resolution == 192);

  for (const auto& name : preset_names()) {
    const ModelSpec p = preset(name);
    CHECK_NOTHROW(p.validate());
    for (Index i = 0; i < 4; ++i) {
      CHECK(p.stages[static_cast<std::size_t>(i)].heads == (Index{1} << i));
      CHECK(p.stages[static_cast<std::size_t>(i)].reduction == (Index{8} >> i));
    }
    CHECK(p.head_width == 1280);
    CHECK(p.num_classes == 1000);
  }
}

TEST_CASE("unknown preset lists the valid names") {
  CHECK_THROWS_AS(preset("nosuch"), ConfigError);
  try {
    preset("nosuch");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    for (const auto& name : preset_names()) CHECK(msg.find(name) != std::string::npos);
  }
}

TEST_CASE("fractional expansion rounds to nearest, ties up") {
  CHECK(StageConfig{1, 46, 1, 8, 3.6}.hidden() == 166);
  CHECK(StageConfig{1, 368, 8, 1, 3.6}.hidden() == 1325);
  CHECK(StageConfig{1, 52, 1, 8, 3.8}.hidden() == 198);
  CHECK(StageConfig{1, 5, 1, 1, 2.5}.hidden() == 13);
  CHECK(StageConfig{1, 64, 1, 8, 4.0}.hidden() == 256);
}

TEST_CASE("validation names the violated invariant") {
  auto rejects = [](ModelSpec s, const std::string& needle) {
    try {
      s.validate();
    } catch (const ConfigError& e) {
      INFO(e.what());
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
      return;
    }
    FAIL("accepted an invalid spec");
  };
  ModelSpec s = preset("CMT-S");
  s.resolution = 200;
  rejects(s, "resolution");
  s = preset("CMT-S");
  s.stages[1].heads = 3;
  rejects(s, "divisible");
  s = preset("CMT-S");
  s.stages[2].reduction = 3;
  rejects(s, "reduction");
  s = preset("CMT-S");
  s.stages[0].depth = 0;
  rejects(s, "depth");
  s = preset("CMT-S");
  s.stages[2].dim = 128;
  rejects(s, "increasing");
}

TEST_CASE("scaling") {
  const ModelSpec s = preset("CMT-S");
  SUBCASE("phi 0 is the identity") {
    for (const auto& name : preset_names()) CHECK(scale(preset(name), {}) == preset(name));
  }
  SUBCASE("CMT-S at phi 1 follows the rounding rules") {
    const ModelSpec up = scale(s, {1.2, 1.3, 1.15, 1.0});
    CHECK(depths(up) == std::array<Index, 4>{4, 4, 19, 4});
    CHECK(up.resolution == 256);
    // 64*1.3 = 83.2 -> 83 (heads 1), 128*1.3 = 166.4 -> 166 (heads 2),
    // 256*1.3 = 332.8 -> 332 (heads 4), 512*1.3 = 665.6 -> 664 (heads 8).
    CHECK(dims(up) == std::array<Index, 4>{83, 166, 332, 664});
    CHECK(up.stem_channels == 42);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(up.stages[i].heads == s.stages[i].heads);
      CHECK(up.stages[i].reduction == s.stages[i].reduction);
      CHECK(up.stages[i].expansion == s.stages[i].expansion);
    }
    CHECK(up.name == "CMT-S-phi1");
  }
  SUBCASE("phi 1 then -1 stays within one rounding step") {
    for (const auto& name : preset_names()) {
      const ModelSpec orig = preset(name);
      const ModelSpec back = scale(scale(orig, {1.2, 1.3, 1.15, 1.0}), {1.2, 1.3, 1.15, -1.0});
      CAPTURE(name);
      CHECK(std::abs(back.resolution - orig.resolution) <= 32);
      for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(back.stages[i].depth - orig.stages[i].depth) <= 1);
    }
    // The CMT-S round trip is exact.
    const ModelSpec back = scale(scale(s, {1.2, 1.3, 1.15, 1.0}), {1.2, 1.3, 1.15, -1.0});
    CHECK(depths(back) == depths(s));
    CHECK(back.resolution == s.resolution);
  }
  SUBCASE("negative phi shrinks until the resolution underflows") {
    const ModelSpec small = scale(s, {1.2, 1.3, 1.15, -10.0});
    CHECK(small.resolution == 64);
    CHECK_NOTHROW(small.validate());
    CHECK_THROWS_AS(scale(s, {1.2, 1.3, 1.15, -19.0}), ConfigError);
  }
  SUBCASE("constants below one are rejected") {
    CHECK_THROWS_AS(scale(s, {0.9, 1.3, 1.15, 1.0}), ConfigError);
  }
  CHECK(scaling_product({}) == doctest::Approx(1.2 * std::pow(1.3, 1.5) * 1.15 * 1.15));
  CHECK(std::abs(scaling_product({}) - 2.352) < 5e-4);
}

TEST_CASE("spec JSON and spec files round trip") {
  testing::TempDir dir;
  const ModelSpec scaled = scale(preset("CMT-Ti"), {1.2, 1.3, 1.15, 1.0});
  CHECK(spec_from_json(spec_to_json(scaled)) == scaled);

  const std::string path = dir.file("ti.spec");
  write_spec_file(path, scaled);
  CHECK(read_spec_file(path) == scaled);

  const std::string bare = dir.file("bare.json");
  std::ofstream(bare) << spec_to_json(preset("CMT-B"));
  CHECK(read_spec_file(bare) == preset("CMT-B"));
}

TEST_CASE("spec files reject damage") {
  testing::TempDir dir;
  const std::string path = dir.file("s.spec");
  write_spec_file(path, preset("CMT-S"));
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  const std::string cut = dir.file("cut.spec");
  std::ofstream(cut, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS_AS(read_spec_file(cut), TruncatedError);

  CHECK_THROWS_AS(spec_from_json("{not json"), FormatError);
  CHECK_THROWS_AS(spec_from_json(R"({"name":"x"})"), FormatError);
  CHECK_THROWS_AS(read_spec_file(dir.file("missing.spec")), IoError);

  ModelSpec bad = preset("CMT-S");
  bad.resolution = 100;
  CHECK_THROWS_AS(spec_from_json(spec_to_json(bad)), ConfigError);
}
