#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "cmt/container.hpp"
#include "cmt/cost.hpp"
#include "cmt/errors.hpp"
#include "cmt/model.hpp"
#include "cmt/verify/suites.hpp"

namespace cmt::cli {

namespace {

struct VerifyFailure {};

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string signed_percent(double ratio) {
  const double pct = (ratio - 1.0) * 100.0;
  return (pct >= 0 ? "+" : "") + fixed(pct, 1) + "%";
}

std::uint64_t default_seed() {
  if (const char* env = std::getenv("CMT_SEED")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0') throw ConfigError(std::string("CMT_SEED is not an unsigned integer: '") + env + "'");
    return v;
  }
  return 0;
}

/// A preset name, or a path to a spec file.
ModelSpec resolve_spec(const std::string& arg) {
  const auto& names = preset_names();
  if (std::find(names.begin(), names.end(), arg) != names.end()) return preset(arg);
  if (std::filesystem::exists(arg)) return read_spec_file(arg);
  std::string valid;
  for (const auto& n : names) valid += (valid.empty() ? "" : ", ") + n;
  throw ConfigError("unknown variant '" + arg + "' (not a preset and no such spec file); valid names: " + valid);
}

const ReferenceCost* published(const ModelSpec& spec) {
  for (const auto& r : reference_costs()) {
    if (r.variant == spec.name && preset(r.variant) == spec) return &r;
  }
  return nullptr;
}

void write_text_atomic(const std::string& path, const std::string& text) {
  write_file_atomic(path, [&](std::ostream& os) { os << text << '\n'; });
}

std::string side(Index s) { return std::to_string(s) + "x" + std::to_string(s); }

std::string expansion(double r) {
  std::ostringstream os;
  os << r;
  return os.str();
}

// Output size, layer, configuration per row; then the totals line.
void describe(const ModelSpec& spec, std::ostream& out) {
  spec.validate();
  out << spec.name << ": " << side(spec.resolution) << " input, stem " << spec.stem_channels << ", head "
      << spec.head_width << ", " << spec.num_classes << " classes\n\n";
  std::vector<std::array<std::string, 3>> rows{{"Output size", "Layer name", "Configuration"}};
  rows.push_back({side(spec.resolution / 2), "Stem",
                  "3x3, " + std::to_string(spec.stem_channels) + ", stride 2; [3x3, " +
                      std::to_string(spec.stem_channels) + "] x 2"});
  for (std::size_t i = 0; i < kNumStages; ++i) {
    const auto& st = spec.stages[i];
    const std::string size = side(spec.stage_side(static_cast<Index>(i)));
    rows.push_back({size, "Patch aggregation", "2x2, " + std::to_string(st.dim) + ", stride 2"});
    rows.push_back({size, "Stage " + std::to_string(i + 1) + " CMT blocks",
                    "[3x3, " + std::to_string(st.dim) + "; H=" + std::to_string(st.heads) +
                        ", k=" + std::to_string(st.reduction) + "; R=" + expansion(st.expansion) + "] x " +
                        std::to_string(st.depth)});
  }
  rows.push_back({"1x1", "Head", "global average pool, FC " + std::to_string(spec.head_width) + ", FC " +
                                     std::to_string(spec.num_classes)});
  std::size_t w0 = 0, w1 = 0;
  for (const auto& r : rows) w0 = std::max(w0, r[0].size()), w1 = std::max(w1, r[1].size());
  for (const auto& r : rows) {
    out << std::left << std::setw(static_cast<int>(w0 + 2)) << r[0] << std::setw(static_cast<int>(w1 + 2)) << r[1]
        << r[2] << '\n';
  }

  const double params = static_cast<double>(count_params(spec).total_params()) / 1e6;
  const double flops = static_cast<double>(count_flops(spec, spec.resolution).total_flops()) / 1e9;
  out << "\n# Params " << fixed(params, 2) << "M";
  const ReferenceCost* ref = published(spec);
  if (ref) {
    out << " (published " << fixed(ref->params_m, 2) << "M, " << signed_percent(params / ref->params_m) << ", tol "
        << "±" << fixed(kParamTolerance * 100, 0) << "%)";
  }
  out << ", # FLOPs " << fixed(flops, 2) << "B @" << spec.resolution << "²";
  if (ref) {
    out << " (published " << fixed(ref->flops_b, 2) << "B, " << signed_percent(flops / ref->flops_b) << ", tol "
        << "±" << fixed(kFlopTolerance * 100, 0) << "%)";
  }
  out << '\n';
}

void analytic_report(const ModelSpec& spec, Index resolution, std::ostream& out) {
  out << "\nclosed form vs instrumented, one block per stage geometry\n";
  for (std::size_t i = 0; i < kNumStages; ++i) {
    const auto& st = spec.stages[i];
    const Index s = ModelSpec::stage_side(static_cast<Index>(i), resolution);
    const Index n = s * s;
    const CMTBlockFlops f = analytic_cmt_block(n, st.dim, st.reduction);
    out << "\nstage " << i + 1 << ": n=" << n << " d=" << st.dim << " k=" << st.reduction << " hidden=" << st.hidden()
        << "  closed form total " << to_string(f.total) << " (" << fixed(f.total.value(), 0) << ")\n";
    out << reconcile(analytic_block_parts(s, s, st), instrumented_block_parts(s, s, st)).render();
  }
}

int cmd_verify(const std::string& suite, const verify::Options& opt, const std::string& json, std::ostream& out) {
  const auto reports = verify::run(suite, opt);
  bool ok = true;
  nlohmann::ordered_json all = nlohmann::ordered_json::array();
  for (const auto& r : reports) {
    out << r.render();
    ok = ok && r.passed();
    all.push_back(nlohmann::ordered_json::parse(r.to_json()));
  }
  if (!json.empty()) write_text_atomic(json, all.dump(2));
  out << (ok ? "verify: all checks passed\n" : "verify: FAILED\n");
  return ok ? kOk : kVerifyFailed;
}

void print_top_k(const Tensorf& logits, Index k, std::ostream& out) {
  const Index classes = logits.dim(1);
  k = std::min(k, classes);
  for (Index b = 0; b < logits.dim(0); ++b) {
    std::vector<Index> idx(static_cast<std::size_t>(classes));
    for (Index c = 0; c < classes; ++c) idx[static_cast<std::size_t>(c)] = c;
    std::stable_sort(idx.begin(), idx.end(), [&](Index a, Index c) { return logits(b, a) > logits(b, c); });
    out << "sample " << b << " top-" << k << ":";
    for (Index j = 0; j < k; ++j) {
      const Index c = idx[static_cast<std::size_t>(j)];
      out << "  " << c << " (" << std::setprecision(6) << logits(b, c) << ")";
    }
    out << '\n';
  }
}

int cmd_infer(const std::string& model_path, const std::string& input_path, bool transfer,
              const std::string& out_path, Index top, std::ostream& out) {
  Model model = load(model_path);
  const auto tensors = load_tensors(input_path);
  if (tensors.size() != 1) {
    throw FormatError("input file '" + input_path + "' holds " + std::to_string(tensors.size()) +
                      " tensors, expected exactly one [N,res,res,3] tensor");
  }
  const Tensorf x = tensors.front().as_f32();
  if (x.rank() != 4 || x.dim(3) != 3 || x.dim(1) != x.dim(2)) {
    throw DimensionError("input tensor " + to_string(x.shape()) + " is not [N,res,res,3]");
  }
  if (x.dim(1) != model.spec.resolution) {
    if (!transfer) {
      throw ResolutionMismatch("input resolution " + std::to_string(x.dim(1)) + " differs from model resolution " +
                               std::to_string(model.spec.resolution) + "; pass --transfer-resolution");
    }
    out << "transferring relative position biases " << model.spec.resolution << " -> " << x.dim(1) << '\n';
    model = transfer_resolution(model, x.dim(1));
  }
  const Tensorf logits = forward(model, x).logits;
  save_tensors(out_path, {NamedTensor{"logits", logits}});
  out << "model " << model.spec.name << " @" << model.spec.resolution << ", input " << to_string(x.shape()) << '\n';
  print_top_k(logits, top, out);
  out << "wrote logits " << to_string(logits.shape()) << " to " << out_path << '\n';
  return kOk;
}

int cmd_scale(const ModelSpec& spec, const ScalingParams& sp, std::string out_path, std::ostream& out) {
  spec.validate();
  const ModelSpec scaled = scale(spec, sp);
  if (out_path.empty()) out_path = scaled.name + ".spec";
  write_spec_file(out_path, scaled);

  auto list = [](const ModelSpec& s, auto field) {
    std::string r = "[";
    for (std::size_t i = 0; i < kNumStages; ++i) r += (i ? "," : "") + std::to_string(field(s.stages[i]));
    return r + "]";
  };
  out << spec.name << " -> " << scaled.name << "  (phi " << sp.phi << ", alpha " << sp.alpha << ", beta " << sp.beta
      << ", gamma " << sp.gamma << ")\n";
  out << "depths      " << list(spec, [](const StageConfig& s) { return s.depth; }) << " -> "
      << list(scaled, [](const StageConfig& s) { return s.depth; }) << '\n';
  out << "dims        " << list(spec, [](const StageConfig& s) { return s.dim; }) << " -> "
      << list(scaled, [](const StageConfig& s) { return s.dim; }) << '\n';
  out << "stem        " << spec.stem_channels << " -> " << scaled.stem_channels << '\n';
  out << "resolution  " << spec.resolution << " -> " << scaled.resolution << '\n';

  const double before = static_cast<double>(count_flops(spec, spec.resolution).total_flops());
  const double after = static_cast<double>(count_flops(scaled, scaled.resolution).total_flops());
  const double ratio = after / before;
  const double lo = std::min(std::pow(2.0, sp.phi), std::pow(2.6, sp.phi));
  const double hi = std::max(std::pow(2.0, sp.phi), std::pow(2.6, sp.phi));
  const bool in_band = ratio >= lo && ratio <= hi;
  out << "FLOPs       " << fixed(before / 1e9, 3) << "B -> " << fixed(after / 1e9, 3) << "B, ratio " << fixed(ratio, 3)
      << " (band [" << fixed(lo, 3) << ", " << fixed(hi, 3) << "], alpha*beta^1.5*gamma^2 = "
      << fixed(scaling_product(sp), 3) << ")" << (in_band ? "" : "  OUT OF BAND") << '\n';
  out << "wrote " << out_path << '\n';
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"CMT hybrid CNN-transformer toolkit", "cmt"};
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = 0;
  bool seed_given = false;
  app.add_option_function<std::uint64_t>(
         "--seed", [&](std::uint64_t v) { seed = v, seed_given = true; },
         "Seed for weight init and random checks (default 0 or $CMT_SEED)")
      ->trigger_on_parse();

  std::string variant, model_path, input_path, out_path, json_path, suite = "all";
  Index resolution = 0, top = 5;
  bool per_layer = false, analytic = false, transfer = false, train = false;
  ScalingParams sp;

  auto* describe_cmd = app.add_subcommand("describe", "Print the stage table and totals of a variant or spec file");
  describe_cmd->add_option("variant", variant, "Preset name or spec file")->required();

  auto* cost_cmd = app.add_subcommand("cost", "Parameter and FLOP report");
  cost_cmd->add_option("variant", variant, "Preset name or spec file")->required();
  cost_cmd->add_option("--resolution", resolution, "Input resolution (multiple of 32; default: the spec's)");
  cost_cmd->add_option("--json", json_path, "Also write the report as JSON");
  cost_cmd->add_flag("--per-layer", per_layer, "List every layer instead of per-block sums");
  cost_cmd->add_flag("--analytic", analytic, "Print closed-form block costs and the reconciliation");

  auto* scale_cmd = app.add_subcommand("scale", "Compound-scale a spec and write the result");
  scale_cmd->add_option("variant", variant, "Preset name or spec file")->required();
  scale_cmd->add_option("--phi", sp.phi, "Compound coefficient")->required();
  scale_cmd->add_option("--alpha", sp.alpha, "Depth base")->capture_default_str();
  scale_cmd->add_option("--beta", sp.beta, "Width base")->capture_default_str();
  scale_cmd->add_option("--gamma", sp.gamma, "Resolution base")->capture_default_str();
  scale_cmd->add_option("-o,--out", out_path, "Spec file to write (default <name>.spec)");

  auto* verify_cmd = app.add_subcommand("verify", "Run property suites; exit 1 on any failure");
  verify_cmd->add_option("--suite", suite, "kernels, blocks, gradients, costs or all")
      ->check(CLI::IsMember({"kernels", "blocks", "gradients", "costs", "all"}))
      ->capture_default_str();
  verify_cmd->add_option("--json", json_path, "Also write the reports as JSON");
  verify_cmd->add_flag("--train", train, "Add the micro-training checks to the gradient suite");

  auto* infer_cmd = app.add_subcommand("infer", "Run a model file on a tensor file");
  infer_cmd->add_option("model", model_path, "Model file (CMTW)")->required();
  infer_cmd->add_option("input", input_path, "Tensor file holding one [N,res,res,3] tensor")->required();
  infer_cmd->add_flag("--transfer-resolution", transfer, "Resize relative biases to the input resolution first");
  infer_cmd->add_option("-o,--out", out_path, "Logits file to write")->capture_default_str();
  infer_cmd->add_option("--top", top, "How many classes to print per sample")->capture_default_str();

  auto* init_cmd = app.add_subcommand("save-init", "Build a randomly initialized model and save it");
  init_cmd->add_option("variant", variant, "Preset name or spec file")->required();
  init_cmd->add_option("-o,--out", out_path, "Model file to write")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    if (auto* sub = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front()) {
      err << sub->help();
    } else {
      err << app.help();
    }
    return kUsage;
  }

  try {
    if (!seed_given) seed = default_seed();
    if (*describe_cmd) {
      describe(resolve_spec(variant), out);
    } else if (*cost_cmd) {
      const ModelSpec spec = resolve_spec(variant);
      spec.validate();
      const Index res = resolution ? resolution : spec.resolution;
      const CostReport report = count_flops(spec, res);
      out << spec.name << " @" << side(res) << '\n' << report.render_table(per_layer);
      if (analytic) analytic_report(spec, res, out);
      if (!json_path.empty()) write_text_atomic(json_path, report.to_json());
    } else if (*scale_cmd) {
      return cmd_scale(resolve_spec(variant), sp, out_path, out);
    } else if (*verify_cmd) {
      verify::Options opt;
      opt.seed = seed;
      opt.micro_train = train;
      return cmd_verify(suite, opt, json_path, out);
    } else if (*infer_cmd) {
      return cmd_infer(model_path, input_path, transfer, out_path.empty() ? "logits.cmtw" : out_path, top, out);
    } else if (*init_cmd) {
      const ModelSpec spec = resolve_spec(variant);
      spec.validate();
      save(build<float>(spec, seed), out_path);
      out << "wrote " << spec.name << " (seed " << seed << ", " << count_params(spec).total_params()
          << " parameters) to " << out_path << '\n';
    }
    return kOk;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kIo;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kIo;
  } catch (const std::invalid_argument& e) {
    // ConfigError, DimensionError, ParameterError, ResolutionMismatch
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
}

}  // namespace cmt::cli
