#include "cmt/cost.hpp"

#include <algorithm>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "cmt/errors.hpp"

namespace cmt {

const char* to_string(CostKind kind) {
  switch (kind) {
    case CostKind::Conv: return "conv";
    case CostKind::DepthwiseConv: return "dwconv";
    case CostKind::Linear: return "linear";
    case CostKind::Attention: return "attention";
    case CostKind::Norm: return "norm";
    case CostKind::Elementwise: return "elementwise";
    case CostKind::Table: return "table";
  }
  return "?";
}

// ---- report ---------------------------------------------------------------

namespace {

template <typename F>
std::int64_t sum_entries(const std::vector<CostEntry>& entries, F&& field) {
  std::int64_t total = 0;
  for (const auto& e : entries) total += field(e);
  return total;
}

std::string group_of(const std::string& name) {
  std::vector<std::string> parts;
  std::stringstream ss(name);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  if (parts.size() >= 4 && parts[0] == "stages" && parts[2] == "blocks") {
    return parts[0] + "." + parts[1] + "." + parts[2] + "." + parts[3];
  }
  if (parts.size() >= 3 && parts[0] == "stages") return parts[0] + "." + parts[1] + "." + parts[2];
  return parts.empty() ? name : parts[0];
}

std::string with_commas(std::int64_t v) {
  std::string digits = std::to_string(v < 0 ? -v : v);
  std::string out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i > 0 && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return v < 0 ? "-" + out : out;
}

}  // namespace

std::int64_t CostReport::total_params() const {
  return sum_entries(entries, [](const CostEntry& e) { return e.params; });
}
std::int64_t CostReport::total_flops() const {
  return sum_entries(entries, [](const CostEntry& e) { return e.flops; });
}
std::int64_t CostReport::total_non_mac() const {
  return sum_entries(entries, [](const CostEntry& e) { return e.non_mac; });
}
std::int64_t CostReport::flops_of(CostKind kind) const {
  return sum_entries(entries, [kind](const CostEntry& e) { return e.kind == kind ? e.flops : 0; });
}
std::int64_t CostReport::params_of(CostKind kind) const {
  return sum_entries(entries, [kind](const CostEntry& e) { return e.kind == kind ? e.params : 0; });
}

std::string CostReport::render_table(bool per_layer) const {
  struct Row {
    std::string name, kind;
    std::int64_t params = 0, flops = 0, non_mac = 0;
  };
  std::vector<Row> rows;
  if (per_layer) {
    for (const auto& e : entries) rows.push_back({e.name, to_string(e.kind), e.params, e.flops, e.non_mac});
  } else {
    for (const auto& e : entries) {
      const std::string g = group_of(e.name);
      if (rows.empty() || rows.back().name != g) rows.push_back({g, "", 0, 0, 0});
      rows.back().params += e.params;
      rows.back().flops += e.flops;
      rows.back().non_mac += e.non_mac;
    }
  }
  std::size_t name_w = 5;
  for (const auto& r : rows) name_w = std::max(name_w, r.name.size());

  std::ostringstream os;
  auto line = [&](const std::string& a, const std::string& k, const std::string& p,
                  const std::string& f, const std::string& nm) {
    os << std::left << std::setw(static_cast<int>(name_w)) << a;
    if (per_layer) os << "  " << std::setw(11) << k;
    os << std::right << "  " << std::setw(14) << p << "  " << std::setw(17) << f << "  "
       << std::setw(15) << nm << '\n';
  };
  line("layer", "kind", "params", "flops", "non-mac");
  for (const auto& r : rows) {
    line(r.name, r.kind, with_commas(r.params), with_commas(r.flops), with_commas(r.non_mac));
  }
  line("total", "", with_commas(total_params()), with_commas(total_flops()),
       with_commas(total_non_mac()));
  os << "resolution " << resolution << "x" << resolution << ", batch " << batch << ", convention "
     << convention << '\n';
  return os.str();
}

std::string CostReport::to_json() const {
  nlohmann::ordered_json j;
  j["convention"] = convention;
  j["resolution"] = resolution;
  j["batch"] = batch;
  j["total_params"] = total_params();
  j["total_flops"] = total_flops();
  j["total_non_mac"] = total_non_mac();
  auto& by_kind = j["flops_by_kind"] = nlohmann::ordered_json::object();
  for (auto k : {CostKind::Conv, CostKind::DepthwiseConv, CostKind::Linear, CostKind::Attention}) {
    by_kind[to_string(k)] = flops_of(k);
  }
  auto& list = j["entries"] = nlohmann::ordered_json::array();
  for (const auto& e : entries) {
    list.push_back({{"name", e.name},
                    {"kind", to_string(e.kind)},
                    {"part", e.part},
                    {"params", e.params},
                    {"flops", e.flops},
                    {"non_mac", e.non_mac}});
  }
  return j.dump(2);
}

// ---- tracer ---------------------------------------------------------------

namespace {

Index out_extent(Index in, Index k, Index stride, CostTracer::Pad pad) {
  switch (pad) {
    case CostTracer::Pad::Same: return (in + k - 1 - k) / stride + 1;
    case CostTracer::Pad::Valid:
      if (in < k) throw ConfigError("cost: kernel " + std::to_string(k) + " exceeds extent " + std::to_string(in));
      return (in - k) / stride + 1;
    case CostTracer::Pad::Ceil: return (in + stride - 1) / stride;
  }
  return 0;
}

}  // namespace

CostTracer::Map CostTracer::conv(const std::string& name, const std::string& part, Map in,
                                 Index cout, Index k, Index stride, Pad pad) {
  const Map out{out_extent(in.h, k, stride, pad), out_extent(in.w, k, stride, pad), cout};
  const Index positions = batch_ * out.tokens();
  entries_.push_back({name, CostKind::Conv, part, k * k * in.c * cout + cout,
                      positions * k * k * in.c * cout, positions * cout});
  return out;
}

CostTracer::Map CostTracer::dwconv(const std::string& name, const std::string& part, Map in,
                                   Index k, Index stride, Pad pad) {
  const Map out{out_extent(in.h, k, stride, pad), out_extent(in.w, k, stride, pad), in.c};
  const Index positions = batch_ * out.tokens();
  entries_.push_back({name, CostKind::DepthwiseConv, part, k * k * in.c + in.c,
                      positions * k * k * in.c, positions * in.c});
  return out;
}

void CostTracer::linear(const std::string& name, const std::string& part, Index rows, Index din,
                        Index dout) {
  entries_.push_back({name, CostKind::Linear, part, din * dout + dout, batch_ * rows * din * dout,
                      batch_ * rows * dout});
}

void CostTracer::attention(const std::string& name, const std::string& part, Index n, Index m,
                           Index d, Index heads) {
  // Scores, bias add and softmax touch n*m entries per head.
  entries_.push_back({name, CostKind::Attention, part, 0, batch_ * 2 * n * m * d,
                      batch_ * heads * n * m * 2});
}

void CostTracer::norm(const std::string& name, const std::string& part, Index elements,
                      Index affine_params) {
  entries_.push_back({name, CostKind::Norm, part, affine_params, 0, batch_ * elements});
}

void CostTracer::elementwise(const std::string& name, const std::string& part, Index elements) {
  entries_.push_back({name, CostKind::Elementwise, part, 0, 0, batch_ * elements});
}

void CostTracer::table(const std::string& name, const std::string& part, Index params,
                       Index added_elements) {
  entries_.push_back({name, CostKind::Table, part, params, 0, batch_ * added_elements});
}

void CostTracer::cmt_block(const std::string& p, Map in, const StageConfig& st) {
  const Index n = in.tokens(), d = in.c, e = st.hidden(), k = st.reduction;
  dwconv(p + ".lpu.dw", "lpu", in, 3, 1, Pad::Same);
  elementwise(p + ".lpu.residual", "lpu", n * d);

  norm(p + ".ln1", "norm", n * d, 2 * d);
  linear(p + ".attn.q", "lmhsa", n, d, d);
  Index m = n;
  if (k > 1) {
    const Map reduced = dwconv(p + ".attn.dw_k", "lmhsa", in, k, k, Pad::Ceil);
    dwconv(p + ".attn.dw_v", "lmhsa", in, k, k, Pad::Ceil);
    m = reduced.tokens();
  }
  linear(p + ".attn.k", "lmhsa", m, d, d);
  linear(p + ".attn.v", "lmhsa", m, d, d);
  attention(p + ".attn.scores", "lmhsa", n, m, d, st.heads);
  linear(p + ".attn.o", "lmhsa", n, d, d);
  elementwise(p + ".attn.residual", "lmhsa", n * d);

  norm(p + ".ln2", "norm", n * d, 2 * d);
  linear(p + ".ffn.expand", "irffn", n, d, e);
  elementwise(p + ".ffn.gelu1", "irffn", n * e);
  norm(p + ".ffn.bn1", "irffn", n * e, 2 * e);
  dwconv(p + ".ffn.dw", "irffn", {in.h, in.w, e}, 3, 1, Pad::Same);
  elementwise(p + ".ffn.shortcut", "irffn", n * e);
  elementwise(p + ".ffn.gelu2", "irffn", n * e);
  norm(p + ".ffn.bn2", "irffn", n * e, 2 * e);
  linear(p + ".ffn.project", "irffn", n, e, d);
  norm(p + ".ffn.bn3", "irffn", n * d, 2 * d);
  elementwise(p + ".ffn.residual", "irffn", n * d);
}

void CostTracer::transformer_block(const std::string& p, Index n, Index d, Index r) {
  norm(p + ".ln1", "norm", n * d, 2 * d);
  for (const char* proj : {"q", "k", "v"}) linear(p + ".attn." + proj, "mhsa", n, d, d);
  attention(p + ".attn.scores", "mhsa", n, n, d, 1);
  linear(p + ".attn.o", "mhsa", n, d, d);
  elementwise(p + ".attn.residual", "mhsa", n * d);
  norm(p + ".ln2", "norm", n * d, 2 * d);
  linear(p + ".ffn.fc1", "ffn", n, d, r * d);
  elementwise(p + ".ffn.gelu", "ffn", n * r * d);
  linear(p + ".ffn.fc2", "ffn", n, r * d, d);
  elementwise(p + ".ffn.residual", "ffn", n * d);
}

CostReport CostTracer::report(Index resolution) && {
  CostReport r;
  r.entries = std::move(entries_);
  r.resolution = resolution;
  r.batch = batch_;
  return r;
}

CostReport count_flops(const ModelSpec& spec, Index resolution, Index batch) {
  spec.validate();
  if (resolution < 32 || resolution % 32 != 0) {
    throw ConfigError("cost: resolution " + std::to_string(resolution) +
                      " must be a positive multiple of 32");
  }
  if (batch < 1) throw ConfigError("cost: batch must be >= 1");
  using Pad = CostTracer::Pad;
  CostTracer t(batch);
  CostTracer::Map x{resolution, resolution, 3};
  for (int i = 0; i < 3; ++i) {
    const std::string name = "stem.conv" + std::to_string(i);
    x = t.conv(name, "stem", x, spec.stem_channels, 3, i == 0 ? 2 : 1, Pad::Same);
    t.norm("stem.bn" + std::to_string(i), "stem", x.tokens() * x.c, 2 * x.c);
    t.elementwise("stem.gelu" + std::to_string(i), "stem", x.tokens() * x.c);
  }
  for (std::size_t i = 0; i < kNumStages; ++i) {
    const auto& st = spec.stages[i];
    const std::string prefix = "stages." + std::to_string(i);
    x = t.conv(prefix + ".agg.conv", "agg", x, st.dim, 2, 2, Pad::Valid);
    t.norm(prefix + ".agg.ln", "agg", x.tokens() * x.c, 2 * x.c);
    const Index m = ((x.h + st.reduction - 1) / st.reduction) * ((x.w + st.reduction - 1) / st.reduction);
    t.table(prefix + ".rel_bias", "lmhsa", st.heads * x.tokens() * m, 0);
    for (Index b = 0; b < st.depth; ++b) t.cmt_block(prefix + ".blocks." + std::to_string(b), x, st);
  }
  t.elementwise("head.pool", "head", x.tokens() * x.c);
  t.linear("head.fc", "head", 1, x.c, spec.head_width);
  t.elementwise("head.gelu", "head", spec.head_width);
  t.linear("head.classifier", "head", 1, spec.head_width, spec.num_classes);
  return std::move(t).report(resolution);
}

CostReport count_params(const ModelSpec& spec) { return count_flops(spec, spec.resolution, 1); }

// ---- closed forms ---------------------------------------------------------

Rational::Rational(std::int64_t n, std::int64_t d) : num(n), den(d) {
  if (den == 0) throw std::invalid_argument("Rational: zero denominator");
  if (den < 0) {
    num = -num;
    den = -den;
  }
  const std::int64_t g = std::gcd(num < 0 ? -num : num, den);
  if (g > 1) {
    num /= g;
    den /= g;
  }
}

Rational operator+(const Rational& a, const Rational& b) {
  const std::int64_t l = std::lcm(a.den, b.den);
  return {a.num * (l / a.den) + b.num * (l / b.den), l};
}

Rational operator-(const Rational& a, const Rational& b) { return a + Rational(-b.num, b.den); }

std::string to_string(const Rational& r) {
  return r.den == 1 ? std::to_string(r.num) : std::to_string(r.num) + "/" + std::to_string(r.den);
}

std::int64_t analytic_mhsa(std::int64_t n, std::int64_t d, std::int64_t dk, std::int64_t dv) {
  return 2 * n * d * (dk + dv) + n * n * (dk + dv);
}

std::int64_t analytic_ffn(std::int64_t n, std::int64_t d, std::int64_t r) { return 2 * n * d * d * r; }

std::int64_t analytic_transformer_block(std::int64_t n, std::int64_t d) {
  return 12 * n * d * d + 2 * n * n * d;
}

CMTBlockFlops analytic_cmt_block(std::int64_t n, std::int64_t d, std::int64_t k) {
  if (n < 1 || d < 1 || k < 1) throw ConfigError("analytic_cmt_block: n, d, k must be >= 1");
  const std::int64_t k2 = k * k;
  CMTBlockFlops f;
  f.lpu = Rational(9 * n * d);
  f.lmhsa = Rational(2 * n * d * d * (k2 + 1) + 2 * n * n * d, k2);
  f.irffn = Rational(8 * n * d * d + 36 * n * d);
  // 10nd^2 (1 + 0.2/k^2) + 2n^2d/k^2 + 45nd
  f.total = Rational(10 * n * d * d * k2 + 2 * n * d * d + 2 * n * n * d + 45 * n * d * k2, k2);
  return f;
}

// ---- reconciliation -------------------------------------------------------

bool ReconcileReport::exact() const {
  return std::all_of(lines.begin(), lines.end(), [](const ReconcileLine& l) { return l.deviation.num == 0; });
}

std::string ReconcileReport::render() const {
  std::ostringstream os;
  os << std::left << std::setw(8) << "part" << std::right << std::setw(18) << "analytic"
     << std::setw(18) << "instrumented" << std::setw(14) << "deviation" << std::setw(11)
     << "relative" << '\n';
  for (const auto& l : lines) {
    os << std::left << std::setw(8) << l.part << std::right << std::fixed << std::setprecision(1)
       << std::setw(18) << l.first.value() << std::setw(18) << l.second.value() << std::setw(14)
       << l.deviation.value() << std::setw(10) << std::setprecision(3) << 100.0 * l.relative
       << "%\n";
    if (!l.explanation.empty()) os << "          " << l.explanation << '\n';
  }
  return os.str();
}

ReconcileReport reconcile(const std::vector<PartCost>& analytic,
                          const std::vector<PartCost>& instrumented) {
  std::vector<std::string> order;
  auto remember = [&](const std::string& part) {
    if (std::find(order.begin(), order.end(), part) == order.end()) order.push_back(part);
  };
  for (const auto& p : analytic) remember(p.part);
  for (const auto& p : instrumented) remember(p.part);

  auto find = [](const std::vector<PartCost>& v, const std::string& part) -> const PartCost* {
    for (const auto& p : v) {
      if (p.part == part) return &p;
    }
    return nullptr;
  };

  ReconcileReport report;
  for (const auto& part : order) {
    const PartCost* a = find(analytic, part);
    const PartCost* b = find(instrumented, part);
    ReconcileLine line;
    line.part = part;
    line.first = a ? a->flops : Rational{};
    line.second = b ? b->flops : Rational{};
    line.deviation = line.second - line.first;
    const double scale = std::max(std::abs(line.first.value()), std::abs(line.second.value()));
    line.relative = scale > 0 ? line.deviation.value() / scale : 0.0;
    if (line.deviation.num != 0) {
      for (const PartCost* p : {a, b}) {
        if (p && !p->note.empty()) {
          line.explanation += (line.explanation.empty() ? "" : "; ") + p->note;
        }
      }
    }
    report.lines.push_back(std::move(line));
  }
  return report;
}

namespace {

std::vector<PartCost> sum_parts(const std::vector<CostEntry>& entries,
                                const std::vector<std::string>& parts) {
  std::vector<PartCost> out;
  for (const auto& part : parts) {
    std::int64_t total = 0;
    for (const auto& e : entries) {
      if (e.part == part) total += e.flops;
    }
    out.push_back({part, Rational(total), {}});
  }
  return out;
}

}  // namespace

std::vector<PartCost> analytic_block_parts(Index h, Index w, const StageConfig& st) {
  const auto f = analytic_cmt_block(h * w, st.dim, st.reduction);
  std::vector<PartCost> parts{{"lpu", f.lpu, {}}, {"lmhsa", f.lmhsa, {}}, {"irffn", f.irffn, {}}};
  if (st.hidden() != 4 * st.dim) {
    parts[2].note = "closed form assumes r = 4; the layer uses hidden width " +
                    std::to_string(st.hidden()) + " for d = " + std::to_string(st.dim);
  }
  return parts;
}

std::vector<PartCost> instrumented_block_parts(Index h, Index w, const StageConfig& st) {
  CostTracer t;
  t.cmt_block("block", {h, w, st.dim}, st);
  auto parts = sum_parts(t.entries(), {"lpu", "lmhsa", "irffn"});
  if (st.reduction > 1) {
    std::string note = "instrumented count includes the two k x k stride-k depthwise reductions of "
                       "the key and value maps, which the closed form omits";
    if (h % st.reduction != 0 || w % st.reduction != 0) {
      note += "; trailing zero padding gives ceil(H/k)*ceil(W/k) reduced tokens instead of n/k^2";
    }
    parts[1].note = note;
  }
  return parts;
}

std::vector<PartCost> analytic_transformer_parts(Index n, Index d) {
  return {{"mhsa", Rational(analytic_mhsa(n, d, d, d)), {}}, {"ffn", Rational(analytic_ffn(n, d, 4)), {}}};
}

std::vector<PartCost> instrumented_transformer_parts(Index n, Index d) {
  CostTracer t;
  t.transformer_block("block", n, d, 4);
  return sum_parts(t.entries(), {"mhsa", "ffn"});
}

const std::vector<ReferenceCost>& reference_costs() {
  static const std::vector<ReferenceCost> rows{
      {"CMT-Ti", 9.49, 0.64, 160},
      {"CMT-XS", 15.24, 1.54, 192},
      {"CMT-S", 25.14, 4.04, 224},
      {"CMT-B", 45.72, 9.33, 256},
  };
  return rows;
}

const ReferenceCost& reference_cost(const std::string& variant) {
  for (const auto& r : reference_costs()) {
    if (r.variant == variant) return r;
  }
  throw ConfigError("no published cost for '" + variant + "'");
}

}  // namespace cmt
