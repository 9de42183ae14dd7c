#include "cmt/spec.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "cmt/container.hpp"

namespace cmt {

namespace {

Index round_half_up(double x) { return static_cast<Index>(std::floor(x + 0.5 + 1e-9)); }

Index round_to_multiple(double x, Index multiple) {
  return round_half_up(x / static_cast<double>(multiple)) * multiple;
}

StageConfig stage(Index depth, Index dim, Index heads, Index reduction, double expansion) {
  return {depth, dim, heads, reduction, expansion};
}

ModelSpec make_preset(std::string name, Index stem, std::array<Index, 4> depths,
                      std::array<Index, 4> dims, double expansion, Index resolution) {
  constexpr std::array<Index, 4> heads{1, 2, 4, 8};
  constexpr std::array<Index, 4> reductions{8, 4, 2, 1};
  ModelSpec spec;
  spec.name = std::move(name);
  spec.stem_channels = stem;
  for (std::size_t i = 0; i < 4; ++i) {
    spec.stages[i] = stage(depths[i], dims[i], heads[i], reductions[i], expansion);
  }
  spec.resolution = resolution;
  return spec;
}

}  // namespace

Index StageConfig::hidden() const { return round_half_up(expansion * static_cast<double>(dim)); }

void ModelSpec::validate() const {
  auto fail = [this](const std::string& what) {
    throw ConfigError("model spec '" + name + "': " + what);
  };
  if (stem_channels < 1) fail("stem_channels must be >= 1");
  if (resolution < 32 || resolution % 32 != 0) {
    fail("resolution " + std::to_string(resolution) + " must be a positive multiple of 32");
  }
  if (head_width < 1) fail("head_width must be >= 1");
  if (num_classes < 1) fail("num_classes must be >= 1");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    const std::string tag = "stage " + std::to_string(i + 1) + ": ";
    if (s.depth < 1) fail(tag + "depth must be >= 1");
    if (s.dim < 1) fail(tag + "dim must be >= 1");
    if (s.heads < 1 || s.dim % s.heads != 0) {
      fail(tag + "dim " + std::to_string(s.dim) + " not divisible by heads " + std::to_string(s.heads));
    }
    if (s.reduction != 1 && s.reduction != 2 && s.reduction != 4 && s.reduction != 8) {
      fail(tag + "reduction " + std::to_string(s.reduction) + " not in {1,2,4,8}");
    }
    if (!(s.expansion > 0) || s.hidden() < s.dim) {
      fail(tag + "expansion " + std::to_string(s.expansion) + " gives hidden width below dim");
    }
    if (i > 0 && s.dim <= stages[i - 1].dim) fail(tag + "stage dims must be strictly increasing");
  }
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"CMT-Ti", "CMT-XS", "CMT-S", "CMT-B"};
  return names;
}

ModelSpec preset(std::string_view name) {
  if (name == "CMT-Ti") return make_preset("CMT-Ti", 16, {2, 2, 10, 2}, {46, 92, 184, 368}, 3.6, 160);
  if (name == "CMT-XS") return make_preset("CMT-XS", 16, {3, 3, 12, 3}, {52, 104, 208, 416}, 3.8, 192);
  if (name == "CMT-S") return make_preset("CMT-S", 32, {3, 3, 16, 3}, {64, 128, 256, 512}, 4.0, 224);
  if (name == "CMT-B") return make_preset("CMT-B", 38, {4, 4, 20, 4}, {76, 152, 304, 608}, 4.0, 256);
  std::string valid;
  for (const auto& n : preset_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw ConfigError("unknown variant '" + std::string(name) + "'; valid names: " + valid);
}

double scaling_product(const ScalingParams& s) {
  return s.alpha * std::pow(s.beta, 1.5) * s.gamma * s.gamma;
}

ModelSpec scale(const ModelSpec& spec, const ScalingParams& s) {
  if (s.alpha < 1 || s.beta < 1 || s.gamma < 1) {
    throw ConfigError("scaling constants alpha, beta, gamma must be >= 1");
  }
  const double depth_f = std::pow(s.alpha, s.phi);
  const double dim_f = std::pow(s.beta, s.phi);
  const double res_f = std::pow(s.gamma, s.phi);

  ModelSpec out = spec;
  if (s.phi != 0.0) {
    std::ostringstream name;
    name << spec.name << "-phi" << s.phi;
    out.name = name.str();
  }
  out.resolution = round_to_multiple(static_cast<double>(spec.resolution) * res_f, 32);
  if (out.resolution < 32) {
    throw ConfigError("scaling by phi=" + std::to_string(s.phi) + " underflows the resolution (" +
                      std::to_string(static_cast<double>(spec.resolution) * res_f) +
                      " rounds to 0)");
  }
  out.stem_channels = std::max<Index>(1, round_half_up(static_cast<double>(spec.stem_channels) * dim_f));
  for (std::size_t i = 0; i < out.stages.size(); ++i) {
    auto& st = out.stages[i];
    st.depth = std::max<Index>(1, round_half_up(static_cast<double>(st.depth) * depth_f));
    st.dim = std::max(st.heads, round_to_multiple(static_cast<double>(st.dim) * dim_f, st.heads));
  }
  out.validate();
  return out;
}

std::string spec_to_json(const ModelSpec& spec) {
  nlohmann::ordered_json j;
  j["name"] = spec.name;
  j["stem_channels"] = spec.stem_channels;
  j["resolution"] = spec.resolution;
  j["head_width"] = spec.head_width;
  j["num_classes"] = spec.num_classes;
  auto& stages = j["stages"] = nlohmann::ordered_json::array();
  for (const auto& s : spec.stages) {
    stages.push_back({{"depth", s.depth},
                      {"dim", s.dim},
                      {"heads", s.heads},
                      {"reduction", s.reduction},
                      {"expansion", s.expansion}});
  }
  return j.dump();
}

ModelSpec spec_from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("spec record is not valid JSON: ") + e.what());
  }
  try {
    ModelSpec spec;
    spec.name = j.at("name").get<std::string>();
    spec.stem_channels = j.at("stem_channels").get<Index>();
    spec.resolution = j.at("resolution").get<Index>();
    spec.head_width = j.value("head_width", Index{1280});
    spec.num_classes = j.value("num_classes", Index{1000});
    const auto& stages = j.at("stages");
    if (!stages.is_array() || stages.size() != kNumStages) {
      throw ConfigError("model spec '" + spec.name + "': exactly 4 stages required");
    }
    for (std::size_t i = 0; i < kNumStages; ++i) {
      const auto& s = stages[i];
      spec.stages[i] = stage(s.at("depth").get<Index>(), s.at("dim").get<Index>(),
                             s.at("heads").get<Index>(), s.at("reduction").get<Index>(),
                             s.at("expansion").get<double>());
    }
    spec.validate();
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("spec record is missing or mistypes a field: ") + e.what());
  }
}

void write_spec_file(const std::string& path, const ModelSpec& spec) {
  const std::string text = spec_to_json(spec);
  write_file_atomic(path, [&](std::ostream& os) {
    write_u32(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
  });
}

ModelSpec read_spec_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open spec file '" + path + "'");
  std::string all((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const auto first = all.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && all[first] == '{') return spec_from_json(all);
  if (all.size() < 4) throw TruncatedError("spec file '" + path + "' is truncated");
  std::uint32_t len = 0;
  for (int i = 3; i >= 0; --i) len = (len << 8) | static_cast<unsigned char>(all[static_cast<std::size_t>(i)]);
  if (all.size() - 4 < len) throw TruncatedError("spec file '" + path + "' is truncated");
  return spec_from_json(std::string_view(all).substr(4, len));
}

}  // namespace cmt
