#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace cmt::verify {

/// One invariant: passes when `worst` < `tolerance` (or, for boolean checks,
/// when the condition held; `worst` is then 0 or 1).
struct Check {
  std::string name;
  bool passed = false;
  double worst = 0;
  double tolerance = 0;
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<Check> checks;
  double seconds = 0;

  bool passed() const;
  int failures() const;
  std::string render() const;
  std::string to_json() const;
};

struct Options {
  std::uint64_t seed = 0;
  int kernel_cases = 100;
  int block_cases = 12;
  int grad_seeds = 10;
  /// Adds the micro-training checks (about a minute) to the gradient suite.
  bool micro_train = false;
  /// Runs full-size forwards of every preset for the pyramid-stride check.
  bool preset_forwards = true;
};

/// kernels, blocks, gradients, costs.
const std::vector<std::string>& suite_names();

SuiteReport kernel_suite(const Options& opt);
SuiteReport block_suite(const Options& opt);
SuiteReport gradient_suite(const Options& opt);
SuiteReport cost_suite(const Options& opt);

/// `name` is one of suite_names() or "all"; throws ConfigError otherwise.
std::vector<SuiteReport> run(std::string_view name, const Options& opt);

/// Accumulates checks; `within` keeps the worst value seen under one name.
class CheckList {
 public:
  void within(const std::string& name, double value, double tolerance, const std::string& detail = {});
  void expect(const std::string& name, bool condition, const std::string& detail = {});
  std::vector<Check> take() && { return std::move(checks_); }
  const std::vector<Check>& checks() const { return checks_; }

 private:
  Check& slot(const std::string& name);
  std::vector<Check> checks_;
};

}  // namespace cmt::verify
