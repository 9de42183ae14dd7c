#include "cmt/verify/suites.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "json.hpp"

#include "cmt/errors.hpp"

namespace cmt::verify {

Check& CheckList::slot(const std::string& name) {
  for (auto& c : checks_) {
    if (c.name == name) return c;
  }
  checks_.push_back({name, true, 0.0, 0.0, {}});
  return checks_.back();
}

void CheckList::within(const std::string& name, double value, double tolerance, const std::string& detail) {
  Check& c = slot(name);
  c.tolerance = tolerance;
  // NaN never passes.
  const bool ok = value < tolerance;
  if (!ok || value > c.worst || std::isnan(value)) {
    if (value > c.worst || std::isnan(value) || (!ok && c.passed)) {
      c.worst = value;
      if (!detail.empty()) c.detail = detail;
    }
  }
  c.passed = c.passed && ok;
}

void CheckList::expect(const std::string& name, bool condition, const std::string& detail) {
  Check& c = slot(name);
  if (!condition) {
    c.worst = 1.0;
    if (c.passed && !detail.empty()) c.detail = detail;
  } else if (c.passed && c.detail.empty()) {
    c.detail = detail;
  }
  c.passed = c.passed && condition;
}

bool SuiteReport::passed() const { return failures() == 0; }

int SuiteReport::failures() const {
  int n = 0;
  for (const auto& c : checks) n += c.passed ? 0 : 1;
  return n;
}

std::string SuiteReport::render() const {
  std::ostringstream os;
  char buf[64];
  for (const auto& c : checks) {
    os << (c.passed ? "PASS  " : "FAIL  ") << suite << '/' << c.name;
    if (c.tolerance > 0) {
      std::snprintf(buf, sizeof buf, "  worst %.3g (tol %.3g)", c.worst, c.tolerance);
      os << buf;
    }
    if (!c.detail.empty()) os << "  " << c.detail;
    os << '\n';
  }
  std::snprintf(buf, sizeof buf, "%.2f", seconds);
  os << suite << ": " << checks.size() - static_cast<std::size_t>(failures()) << '/' << checks.size()
     << " passed in " << buf << " s\n";
  return os.str();
}

std::string SuiteReport::to_json() const {
  nlohmann::ordered_json j;
  j["suite"] = suite;
  j["passed"] = passed();
  j["seconds"] = seconds;
  auto& arr = j["checks"] = nlohmann::ordered_json::array();
  for (const auto& c : checks) {
    arr.push_back({{"name", c.name},
                   {"passed", c.passed},
                   {"worst", c.worst},
                   {"tolerance", c.tolerance},
                   {"detail", c.detail}});
  }
  return j.dump(2);
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"kernels", "blocks", "gradients", "costs"};
  return names;
}

std::vector<SuiteReport> run(std::string_view name, const Options& opt) {
  std::vector<SuiteReport> out;
  const bool all = name == "all";
  if (all || name == "kernels") out.push_back(kernel_suite(opt));
  if (all || name == "blocks") out.push_back(block_suite(opt));
  if (all || name == "gradients") out.push_back(gradient_suite(opt));
  if (all || name == "costs") out.push_back(cost_suite(opt));
  if (out.empty()) {
    throw ConfigError("unknown suite '" + std::string(name) + "'; expected kernels, blocks, gradients, costs or all");
  }
  return out;
}

}  // namespace cmt::verify
