#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmt/spec.hpp"

// Shape-only parameter and FLOP accounting. One multiply-accumulate counts as
// one FLOP; softmax, GELU, normalization, bias and residual adds and pooling
// are reported separately in the non-MAC column (one per output element).

namespace cmt {

inline constexpr const char* kFlopConvention = "mac=1flop";

enum class CostKind { Conv, DepthwiseConv, Linear, Attention, Norm, Elementwise, Table };

const char* to_string(CostKind kind);

struct CostEntry {
  std::string name;
  CostKind kind = CostKind::Conv;
  std::string part;  // lpu, lmhsa, irffn, stem, agg, head, ...
  std::int64_t params = 0;
  std::int64_t flops = 0;
  std::int64_t non_mac = 0;
};

struct CostReport {
  std::vector<CostEntry> entries;
  Index resolution = 0;
  Index batch = 1;
  std::string convention = kFlopConvention;

  std::int64_t total_params() const;
  std::int64_t total_flops() const;
  std::int64_t total_non_mac() const;
  std::int64_t flops_of(CostKind kind) const;
  std::int64_t params_of(CostKind kind) const;

  /// Aligned text table. `per_layer` lists every entry; otherwise entries are
  /// summed per stem, aggregation, bias table, block and head.
  std::string render_table(bool per_layer = false) const;
  std::string to_json() const;
};

/// Appends entries while tracking layer geometry symbolically.
class CostTracer {
 public:
  explicit CostTracer(Index batch = 1) : batch_(batch) {}

  /// Same: floor/ceil split of k-1; Valid: none; Ceil: trailing zeros up to a
  /// multiple of the stride.
  enum class Pad { Same, Valid, Ceil };

  struct Map {
    Index h = 0;
    Index w = 0;
    Index c = 0;
    Index tokens() const { return h * w; }
  };

  Map conv(const std::string& name, const std::string& part, Map in, Index cout, Index k,
           Index stride, Pad pad);
  Map dwconv(const std::string& name, const std::string& part, Map in, Index k, Index stride,
             Pad pad);
  /// Linear applied to `rows` tokens per sample.
  void linear(const std::string& name, const std::string& part, Index rows, Index din, Index dout);
  /// QK^T and AV for n queries against m keys over total width d (all heads).
  void attention(const std::string& name, const std::string& part, Index n, Index m, Index d,
                 Index heads);
  void norm(const std::string& name, const std::string& part, Index elements, Index affine_params);
  void elementwise(const std::string& name, const std::string& part, Index elements);
  void table(const std::string& name, const std::string& part, Index params, Index added_elements);

  /// The stage-owned relative bias table is not part of the block.
  void cmt_block(const std::string& prefix, Map in, const StageConfig& st);
  void transformer_block(const std::string& prefix, Index n, Index d, Index r);

  CostReport report(Index resolution) &&;
  const std::vector<CostEntry>& entries() const { return entries_; }

 private:
  Index batch_;
  std::vector<CostEntry> entries_;
};

/// Published totals for the four presets at their native resolution.
struct ReferenceCost {
  std::string variant;
  double params_m = 0;  // millions
  double flops_b = 0;   // billions of MACs
  Index resolution = 0;
};

const std::vector<ReferenceCost>& reference_costs();
/// Throws ConfigError for names without a published row.
const ReferenceCost& reference_cost(const std::string& variant);

inline constexpr double kParamTolerance = 0.03;
inline constexpr double kFlopTolerance = 0.05;

/// Learnable scalars at the spec resolution (BN running statistics excluded).
CostReport count_params(const ModelSpec& spec);
CostReport count_flops(const ModelSpec& spec, Index resolution, Index batch = 1);

/// Exact rational value (closed forms divide by k^2).
struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  Rational() = default;
  Rational(std::int64_t n, std::int64_t d = 1);
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  friend Rational operator+(const Rational& a, const Rational& b);
  friend Rational operator-(const Rational& a, const Rational& b);
  friend bool operator==(const Rational& a, const Rational& b) = default;
};

std::string to_string(const Rational& r);

/// MHSA cost with key width dk and value width dv.
std::int64_t analytic_mhsa(std::int64_t n, std::int64_t d, std::int64_t dk, std::int64_t dv);
std::int64_t analytic_ffn(std::int64_t n, std::int64_t d, std::int64_t r);
/// 12nd^2 + 2n^2d.
std::int64_t analytic_transformer_block(std::int64_t n, std::int64_t d);

struct CMTBlockFlops {
  Rational lpu;
  Rational lmhsa;
  Rational irffn;
  /// Evaluated from the combined closed form, not by summing the parts.
  Rational total;
};

CMTBlockFlops analytic_cmt_block(std::int64_t n, std::int64_t d, std::int64_t k);

struct PartCost {
  std::string part;
  Rational flops;
  std::string note;  // known systematic difference to the other side, if any
};

struct ReconcileLine {
  std::string part;
  Rational first;
  Rational second;
  Rational deviation;  // second - first
  double relative = 0; // deviation / max(|first|, |second|)
  std::string explanation;
};

struct ReconcileReport {
  std::vector<ReconcileLine> lines;
  bool exact() const;
  std::string render() const;
};

/// Pairs parts by name; parts present on one side only compare against 0.
ReconcileReport reconcile(const std::vector<PartCost>& analytic,
                          const std::vector<PartCost>& instrumented);

/// Per-part analytic and instrumented costs of one CMT block on an h x w map.
std::vector<PartCost> analytic_block_parts(Index h, Index w, const StageConfig& st);
std::vector<PartCost> instrumented_block_parts(Index h, Index w, const StageConfig& st);

/// Standard transformer block (4 projections, attention, d -> rd -> d FFN).
std::vector<PartCost> analytic_transformer_parts(Index n, Index d);
std::vector<PartCost> instrumented_transformer_parts(Index n, Index d);

}  // namespace cmt
