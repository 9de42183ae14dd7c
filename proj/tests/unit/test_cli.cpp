#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "cli.hpp"
#include "cmt/container.hpp"
#include "cmt/model.hpp"
#include "cmt/rng.hpp"
#include "support.hpp"

using namespace cmt;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Result r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream(path, std::ios::binary) << bytes;
}

/// Small model and a matching random input written into `dir`.
void small_model_files(const testing::TempDir& dir, Index input_res = 32) {
  save(build<float>(testing::small_spec(), 0), dir.file("model.cmtw"));
  Rng rng(1);
  save_tensors(dir.file("input.cmtw"), {{"x", random_normal<float>({2, input_res, input_res, 3}, rng)}});
}

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(run({}).code == cli::kUsage);
  CHECK(run({"frobnicate"}).code == cli::kUsage);
  CHECK(run({"describe"}).code == cli::kUsage);
  CHECK(run({"scale", "CMT-S"}).code == cli::kUsage);
  CHECK(run({"cost", "CMT-S", "--resolution", "abc"}).code == cli::kUsage);
}

TEST_CASE("describe") {
  const Result s = run({"describe", "CMT-S"});
  CHECK(s.code == cli::kOk);
  CHECK(s.out.find("Stage 3 CMT blocks") != std::string::npos);
  CHECK(s.out.find("14x14") != std::string::npos);
  CHECK(s.out.find("published 25.14M") != std::string::npos);
  CHECK(s.out.find("# FLOPs") != std::string::npos);
  CHECK(s.out.find("@224") != std::string::npos);

  const Result ti = run({"describe", "CMT-Ti"});
  CHECK(ti.out.find("160x160 input, stem 16") != std::string::npos);

  const Result bad = run({"describe", "nosuch"});
  CHECK(bad.code == cli::kUsage);
  CHECK(bad.err.find("CMT-Ti, CMT-XS, CMT-S, CMT-B") != std::string::npos);
}

TEST_CASE("cost") {
  testing::TempDir dir;
  const Result b = run({"cost", "CMT-B", "--resolution", "256", "--json", dir.file("b.json")});
  CHECK(b.code == cli::kOk);
  const auto j = nlohmann::json::parse(read_bytes(dir.file("b.json")));
  const double flops = j["total_flops"].get<double>() / 1e9;
  CHECK(std::abs(flops / 9.33 - 1.0) < 0.05);
  CHECK(j["convention"] == "mac=1flop");

  const Result analytic = run({"cost", "CMT-S", "--analytic"});
  CHECK(analytic.code == cli::kOk);
  CHECK(analytic.out.find("closed form") != std::string::npos);
  CHECK(analytic.out.find("stage 4: n=49 d=512 k=1") != std::string::npos);

  CHECK(run({"cost", "CMT-S", "--per-layer"}).out.find("stages.2.blocks.15") != std::string::npos);
  CHECK(run({"cost", "CMT-S", "--resolution", "200"}).code == cli::kUsage);
  CHECK_FALSE(fs::exists(dir.file("none.json")));
  CHECK(run({"cost", "CMT-S", "--resolution", "200", "--json", dir.file("none.json")}).code == cli::kUsage);
  CHECK_FALSE(fs::exists(dir.file("none.json")));
}

TEST_CASE("scale writes a spec every other command accepts") {
  testing::TempDir dir;
  const std::string spec = dir.file("s1.spec");
  const Result r = run({"scale", "CMT-S", "--phi", "1", "-o", spec});
  CHECK(r.code == cli::kOk);
  CHECK(r.out.find("[3,3,16,3] -> [4,4,19,4]") != std::string::npos);
  CHECK(r.out.find("resolution  224 -> 256") != std::string::npos);
  CHECK(r.out.find("OUT OF BAND") != std::string::npos);
  CHECK(read_spec_file(spec).resolution == 256);

  CHECK(run({"describe", spec}).code == cli::kOk);
  CHECK(run({"cost", spec}).code == cli::kOk);

  write_spec_file(dir.file("small.spec"), testing::small_spec());
  const std::string scaled = dir.file("small1.spec");
  CHECK(run({"scale", dir.file("small.spec"), "--phi", "1", "-o", scaled}).code == cli::kOk);
  CHECK(run({"save-init", scaled, "-o", dir.file("m.cmtw")}).code == cli::kOk);
  CHECK(load(dir.file("m.cmtw")).spec == read_spec_file(scaled));

  CHECK(run({"scale", "CMT-S", "--phi", "0", "-o", dir.file("same.spec")}).code == cli::kOk);
  CHECK(read_spec_file(dir.file("same.spec")) == preset("CMT-S"));

  CHECK(run({"scale", "CMT-S", "--phi", "-10", "-o", dir.file("tiny.spec")}).code == cli::kOk);
  CHECK(run({"scale", "CMT-S", "--phi", "-19", "-o", dir.file("under.spec")}).code == cli::kUsage);
  CHECK_FALSE(fs::exists(dir.file("under.spec")));
}

TEST_CASE("verify exit codes") {
  CHECK(run({"verify", "--suite", "kernels"}).code == cli::kOk);
  const Result costs = run({"verify", "--suite", "costs"});
  CHECK(costs.code == cli::kVerifyFailed);
  CHECK(costs.out.find("FAIL  costs/CMT-S params") != std::string::npos);
  CHECK(run({"verify", "--suite", "bogus"}).code == cli::kUsage);
}

TEST_CASE("infer") {
  testing::TempDir dir;
  small_model_files(dir);
  const Result a = run({"infer", dir.file("model.cmtw"), dir.file("input.cmtw"), "-o", dir.file("a.cmtw")});
  const Result b = run({"infer", dir.file("model.cmtw"), dir.file("input.cmtw"), "-o", dir.file("b.cmtw")});
  CHECK(a.code == cli::kOk);
  CHECK(a.out.find("sample 1 top-5") != std::string::npos);
  CHECK(read_bytes(dir.file("a.cmtw")) == read_bytes(dir.file("b.cmtw")));
  const auto logits = load_tensors(dir.file("a.cmtw"));
  REQUIRE(logits.size() == 1);
  CHECK(logits[0].shape() == Shape{2, 10});

  SUBCASE("resolution mismatch needs the transfer flag") {
    Rng rng(2);
    save_tensors(dir.file("big.cmtw"), {{"x", random_normal<float>({1, 64, 64, 3}, rng)}});
    CHECK(run({"infer", dir.file("model.cmtw"), dir.file("big.cmtw"), "-o", dir.file("c.cmtw")}).code ==
          cli::kUsage);
    CHECK_FALSE(fs::exists(dir.file("c.cmtw")));
    CHECK(run({"infer", dir.file("model.cmtw"), dir.file("big.cmtw"), "--transfer-resolution", "-o",
               dir.file("c.cmtw")})
              .code == cli::kOk);
    CHECK(fs::exists(dir.file("c.cmtw")));
  }
  SUBCASE("corrupt or malformed files exit 3 without output") {
    const std::string bytes = read_bytes(dir.file("model.cmtw"));
    write_bytes(dir.file("cut.cmtw"), bytes.substr(0, bytes.size() / 2));
    CHECK(run({"infer", dir.file("cut.cmtw"), dir.file("input.cmtw"), "-o", dir.file("d.cmtw")}).code == cli::kIo);
    std::string magic = bytes;
    magic[0] = 'X';
    write_bytes(dir.file("magic.cmtw"), magic);
    CHECK(run({"infer", dir.file("magic.cmtw"), dir.file("input.cmtw"), "-o", dir.file("d.cmtw")}).code == cli::kIo);
    save_tensors(dir.file("two.cmtw"), {{"x", Tensorf({1, 32, 32, 3})}, {"y", Tensorf({1})}});
    CHECK(run({"infer", dir.file("model.cmtw"), dir.file("two.cmtw"), "-o", dir.file("d.cmtw")}).code == cli::kIo);
    CHECK(run({"infer", dir.file("missing.cmtw"), dir.file("input.cmtw"), "-o", dir.file("d.cmtw")}).code ==
          cli::kIo);
    CHECK_FALSE(fs::exists(dir.file("d.cmtw")));
  }
}

TEST_CASE("seeds come from the flag or CMT_SEED") {
  testing::TempDir dir;
  write_spec_file(dir.file("small.spec"), testing::small_spec());
  CHECK(run({"save-init", dir.file("small.spec"), "-o", dir.file("flag.cmtw"), "--seed", "5"}).code == cli::kOk);
  ::setenv("CMT_SEED", "5", 1);
  CHECK(run({"save-init", dir.file("small.spec"), "-o", dir.file("env.cmtw")}).code == cli::kOk);
  ::setenv("CMT_SEED", "junk", 1);
  CHECK(run({"save-init", dir.file("small.spec"), "-o", dir.file("junk.cmtw")}).code == cli::kUsage);
  ::unsetenv("CMT_SEED");
  CHECK(run({"save-init", dir.file("small.spec"), "-o", dir.file("default.cmtw")}).code == cli::kOk);

  CHECK(read_bytes(dir.file("flag.cmtw")) == read_bytes(dir.file("env.cmtw")));
  CHECK(read_bytes(dir.file("flag.cmtw")) != read_bytes(dir.file("default.cmtw")));
  CHECK(load(dir.file("default.cmtw")).seed == 0);
  CHECK_FALSE(fs::exists(dir.file("junk.cmtw")));
}
