#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "cmt/tensor.hpp"

namespace cmt {

struct StageConfig {
  Index depth = 1;
  Index dim = 1;
  Index heads = 1;
  Index reduction = 1;
  double expansion = 4.0;

  /// round(expansion * dim), ties up.
  Index hidden() const;

  friend bool operator==(const StageConfig&, const StageConfig&) = default;
};

inline constexpr Index kNumStages = 4;

struct ModelSpec {
  std::string name;
  Index stem_channels = 32;
  std::array<StageConfig, kNumStages> stages{};
  Index resolution = 224;
  Index head_width = 1280;
  Index num_classes = 1000;

  /// Throws ConfigError naming the first violated invariant.
  void validate() const;

  /// Spatial side of stage i's feature map (stride 4, 8, 16, 32).
  Index stage_side(Index stage) const { return stage_side(stage, resolution); }
  static Index stage_side(Index stage, Index resolution) { return resolution >> (stage + 2); }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Presets CMT-Ti, CMT-XS, CMT-S, CMT-B.
ModelSpec preset(std::string_view name);
const std::vector<std::string>& preset_names();

/// Compound scaling constants; depth alpha^phi, dims beta^phi, resolution gamma^phi.
struct ScalingParams {
  double alpha = 1.2;
  double beta = 1.3;
  double gamma = 1.15;
  double phi = 0.0;
};

/// Depths round half-up (min 1), dims snap to the nearest multiple of the
/// stage head count, stem channels round to nearest, resolution snaps to the
/// nearest multiple of 32. Heads, reductions and expansions are unchanged.
ModelSpec scale(const ModelSpec& spec, const ScalingParams& s);

/// alpha * beta^1.5 * gamma^2.
double scaling_product(const ScalingParams& s);

/// JSON text of the spec record.
std::string spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(std::string_view text);

/// Spec file: u32 little-endian byte length followed by the JSON record.
/// Reading also accepts a bare JSON document.
void write_spec_file(const std::string& path, const ModelSpec& spec);
ModelSpec read_spec_file(const std::string& path);

}  // namespace cmt
