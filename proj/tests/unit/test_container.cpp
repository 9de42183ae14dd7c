#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cmt/container.hpp"
#include "cmt/errors.hpp"
#include "cmt/rng.hpp"
#include "support.hpp"

using namespace cmt;

namespace {

std::vector<NamedTensor> sample_tensors() {
  Rng rng(5);
  return {{"a", random_normal<float>({2, 3, 4}, rng)},
          {"b.weight", random_normal<double>({5}, rng)},
          {"c", Tensorf({1}, 7.0f)}};
}

std::string serialized(const std::vector<NamedTensor>& t) {
  std::ostringstream os;
  write_tensors(os, t);
  return os.str();
}

}  // namespace

TEST_CASE("tensors round trip with their dtype") {
  testing::TempDir dir;
  const auto tensors = sample_tensors();
  save_tensors(dir.file("t.cmtw"), tensors);
  const auto back = load_tensors(dir.file("t.cmtw"));
  REQUIRE(back.size() == tensors.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].name == tensors[i].name);
    CHECK(back[i].dtype() == tensors[i].dtype());
    CHECK(back[i].value == tensors[i].value);
  }
  CHECK(back[1].as_f32().shape() == Shape{5});
  CHECK(back[0].as_f64() == std::get<Tensorf>(tensors[0].value).cast<double>());
}

TEST_CASE("spec record travels ahead of the table") {
  std::stringstream ss;
  write_tensors(ss, sample_tensors(), std::string("{\"k\":1}"));
  const auto contents = read_tensors(ss, true);
  REQUIRE(contents.spec_record.has_value());
  CHECK(*contents.spec_record == "{\"k\":1}");
  CHECK(contents.tensors.size() == 3);
}

TEST_CASE("reader rejects damaged streams with distinct errors") {
  const std::string good = serialized(sample_tensors());

  SUBCASE("bad magic names the expected bytes") {
    std::string bad = good;
    bad[0] = 'X';
    std::istringstream is(bad);
    try {
      read_tensors(is);
      FAIL("accepted bad magic");
    } catch (const BadMagicError& e) {
      CHECK(std::string(e.what()).find("CMTW") != std::string::npos);
    }
  }
  SUBCASE("unknown version") {
    std::string bad = good;
    bad[4] = 9;
    std::istringstream is(bad);
    CHECK_THROWS_AS(read_tensors(is), VersionError);
  }
  SUBCASE("every truncation point is a truncation error") {
    for (std::size_t len = 0; len < good.size(); len += 7) {
      std::istringstream is(good.substr(0, len));
      CAPTURE(len);
      CHECK_THROWS_AS(read_tensors(is), TruncatedError);
    }
  }
  SUBCASE("unknown dtype code") {
    // magic 4 + version 4 + count 4 + name_len 4 + "a" 1 -> dtype byte.
    std::string bad = good;
    bad[17] = 5;
    std::istringstream is(bad);
    CHECK_THROWS_AS(read_tensors(is), FormatError);
  }
}

TEST_CASE("atomic writes leave nothing behind on failure") {
  testing::TempDir dir;
  const std::string path = dir.file("out.bin");
  CHECK_THROWS(write_file_atomic(path, [](std::ostream& os) {
    os << "partial";
    throw std::runtime_error("writer failed");
  }));
  CHECK_FALSE(std::filesystem::exists(path));
  CHECK(std::filesystem::is_empty(dir.path()));

  save_tensors(path, sample_tensors());
  const auto before = std::filesystem::file_size(path);
  CHECK_THROWS(write_file_atomic(path, [](std::ostream&) { throw std::runtime_error("again"); }));
  CHECK(std::filesystem::file_size(path) == before);

  CHECK_THROWS_AS(save_tensors(dir.file("no/such/dir/x.cmtw"), sample_tensors()), IoError);
  CHECK_THROWS_AS(load_tensors(dir.file("missing.cmtw")), IoError);
}
