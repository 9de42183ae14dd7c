#pragma once

#include <atomic>
#include <filesystem>
#include <string>

#include <unistd.h>

#include "cmt/spec.hpp"

namespace cmt::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("cmt_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// dims [8,16,32,64], one block per stage, 32x32 input, small head.
inline ModelSpec small_spec() {
  ModelSpec spec;
  spec.name = "small";
  spec.stem_channels = 8;
  const Index dims[4] = {8, 16, 32, 64}, heads[4] = {1, 2, 4, 8}, red[4] = {8, 4, 2, 1};
  for (std::size_t i = 0; i < kNumStages; ++i) spec.stages[i] = {1, dims[i], heads[i], red[i], 4.0};
  spec.resolution = 32;
  spec.head_width = 32;
  spec.num_classes = 10;
  return spec;
}

}  // namespace cmt::testing
