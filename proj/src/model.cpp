#include "cmt/model.hpp"

#include <fstream>

#include "json.hpp"

#include "cmt/container.hpp"
#include "cmt/rng.hpp"

namespace cmt {

namespace {

constexpr double kInitStd = 0.02;

template <typename S>
ConvWeights<S> conv(Index kh, Index kw, Index cin, Index cout, Index stride, Padding pad) {
  return {Tensor<S>({kh, kw, cin, cout}), Tensor<S>({cout}), stride, pad};
}

template <typename S>
ConvWeights<S> depthwise(Index k, Index c, Index stride, Padding pad) {
  return {Tensor<S>({k, k, c}), Tensor<S>({c}), stride, pad};
}

template <typename S>
Linear<S> dense(Index din, Index dout) {
  return {Tensor<S>({din, dout}), Tensor<S>({dout})};
}

template <typename S>
LayerNormParams<S> layer_norm_params(Index d) {
  return {Tensor<S>({d}, S(1)), Tensor<S>({d})};
}

template <typename S>
BatchNormParams<S> batch_norm_params(Index c) {
  return {Tensor<S>({c}, S(1)), Tensor<S>({c}), Tensor<S>({c}), Tensor<S>({c}, S(1))};
}

template <typename S>
CMTBlockParams<S> make_block(const StageConfig& st) {
  const Index d = st.dim, e = st.hidden(), k = st.reduction;
  CMTBlockParams<S> b;
  b.lpu.dw = depthwise<S>(3, d, 1, Padding::same(3, 3));
  b.ln1 = layer_norm_params<S>(d);
  b.attn.q = dense<S>(d, d);
  b.attn.k = dense<S>(d, d);
  b.attn.v = dense<S>(d, d);
  b.attn.o = dense<S>(d, d);
  if (k > 1) {
    b.attn.dw_k = depthwise<S>(k, d, k, Padding{});
    b.attn.dw_v = depthwise<S>(k, d, k, Padding{});
  }
  b.attn.heads = st.heads;
  b.attn.reduction = k;
  b.ln2 = layer_norm_params<S>(d);
  b.ffn.expand = dense<S>(d, e);
  b.ffn.bn1 = batch_norm_params<S>(e);
  b.ffn.dw = depthwise<S>(3, e, 1, Padding::same(3, 3));
  b.ffn.bn2 = batch_norm_params<S>(e);
  b.ffn.project = dense<S>(e, d);
  b.ffn.bn3 = batch_norm_params<S>(d);
  return b;
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <typename S>
Tensor<S> relative_bias(const ModelSpec& spec, std::size_t stage, Index resolution) {
  const auto& st = spec.stages[stage];
  const Index side = ModelSpec::stage_side(static_cast<Index>(stage), resolution);
  const Index reduced = reduced_extent(side, st.reduction);
  return Tensor<S>({st.heads, side * side, reduced * reduced});
}

}  // namespace

template <typename Scalar>
ModelT<Scalar> build(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelT<Scalar> m;
  m.spec = spec;
  m.seed = seed;

  const Index c = spec.stem_channels;
  m.stem.conv[0] = conv<Scalar>(3, 3, 3, c, 2, Padding::same(3, 3));
  m.stem.conv[1] = conv<Scalar>(3, 3, c, c, 1, Padding::same(3, 3));
  m.stem.conv[2] = conv<Scalar>(3, 3, c, c, 1, Padding::same(3, 3));
  for (auto& bn : m.stem.bn) bn = batch_norm_params<Scalar>(c);

  Index in_ch = c;
  for (std::size_t i = 0; i < kNumStages; ++i) {
    const auto& st = spec.stages[i];
    auto& stage = m.stages[i];
    stage.agg.conv = conv<Scalar>(2, 2, in_ch, st.dim, 2, Padding{});
    stage.agg.ln = layer_norm_params<Scalar>(st.dim);
    stage.rel_bias = relative_bias<Scalar>(spec, i, spec.resolution);
    for (Index b = 0; b < st.depth; ++b) stage.blocks.push_back(make_block<Scalar>(st));
    in_ch = st.dim;
  }
  m.head.fc = dense<Scalar>(in_ch, spec.head_width);
  m.head.classifier = dense<Scalar>(spec.head_width, spec.num_classes);

  Rng rng(seed);
  visit_model(m, [&](const std::string& name, Tensor<Scalar>& t, bool) {
    if (ends_with(name, ".weight") || ends_with(name, ".rel_bias")) {
      for (auto& v : t.values()) v = static_cast<Scalar>(rng.trunc_normal(kInitStd));
    }
  });
  return m;
}

template <typename Scalar>
ForwardResult<Scalar> forward(const ModelT<Scalar>& model, const Tensor<Scalar>& x) {
  const Index res = model.spec.resolution;
  if (x.rank() != 4 || x.dim(3) != 3) {
    throw DimensionError("forward: expected [N,res,res,3] input, got " + to_string(x.shape()));
  }
  if (x.dim(1) != res || x.dim(2) != res) {
    throw ResolutionMismatch("forward: input " + to_string(x.shape()) + " does not match model resolution " +
                             std::to_string(res) + "; run transfer_resolution first");
  }
  ForwardResult<Scalar> out;
  Tensor<Scalar> h = stem_forward(model.stem, x);
  for (std::size_t i = 0; i < kNumStages; ++i) {
    const auto& stage = model.stages[i];
    h = patch_agg_forward(stage.agg, h);
    for (const auto& block : stage.blocks) h = cmt_block_forward(block, stage.rel_bias, h);
    out.pyramid[i] = h;
  }
  const Tensor<Scalar> pooled = global_avg_pool(h);
  out.logits = linear(gelu(linear(pooled, model.head.fc)), model.head.classifier);
  return out;
}

template <typename Scalar>
ModelT<Scalar> transfer_resolution(const ModelT<Scalar>& model, Index resolution) {
  if (resolution < 32 || resolution % 32 != 0) {
    throw ConfigError("transfer_resolution: resolution " + std::to_string(resolution) +
                      " must be a positive multiple of 32");
  }
  ModelT<Scalar> out = model;
  out.spec.resolution = resolution;
  for (std::size_t i = 0; i < kNumStages; ++i) {
    const Tensor<Scalar>& old_bias = model.stages[i].rel_bias;
    Tensor<Scalar> bias = relative_bias<Scalar>(out.spec, i, resolution);
    const Index heads = bias.dim(0), n = bias.dim(1), m = bias.dim(2);
    const Index old_n = old_bias.dim(1), old_m = old_bias.dim(2);
    for (Index h = 0; h < heads; ++h) {
      Tensor<Scalar> slice({old_n, old_m});
      std::copy_n(&old_bias(h, 0, 0), old_n * old_m, slice.data());
      const Tensor<Scalar> resized = bicubic_resize(slice, n, m);
      std::copy_n(resized.data(), n * m, &bias(h, 0, 0));
    }
    out.stages[i].rel_bias = std::move(bias);
  }
  return out;
}

void save(const Model& model, const std::string& path) {
  auto record = nlohmann::ordered_json::parse(spec_to_json(model.spec));
  record["build_seed"] = model.seed;
  std::vector<NamedTensor> tensors;
  visit_model(model, [&](const std::string& name, const Tensorf& t, bool) {
    tensors.push_back({name, t});
  });
  const std::string text = record.dump();
  write_file_atomic(path, [&](std::ostream& os) { write_tensors(os, tensors, text); });
}

Model load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open model file '" + path + "'");
  ContainerContents contents = read_tensors(is, /*expect_spec_record=*/true);
  const ModelSpec spec = spec_from_json(*contents.spec_record);
  std::uint64_t seed = 0;
  try {
    seed = nlohmann::json::parse(*contents.spec_record).value("build_seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception&) {
    throw FormatError("model file '" + path + "': malformed build_seed");
  }

  // Stored bias geometry wins over the spec resolution check: allocate by spec,
  // then require every tensor to match by name and shape.
  Model model = build<float>(spec, seed);
  std::size_t next = 0;
  visit_model(model, [&](const std::string& name, Tensorf& t, bool) {
    if (next >= contents.tensors.size()) {
      throw FormatError("model file '" + path + "': missing tensor '" + name + "'");
    }
    const NamedTensor& stored = contents.tensors[next++];
    if (stored.name != name) {
      throw FormatError("model file '" + path + "': expected tensor '" + name + "', found '" +
                        stored.name + "'");
    }
    if (stored.shape() != t.shape()) {
      throw FormatError("model file '" + path + "': tensor '" + name + "' has shape " +
                        to_string(stored.shape()) + ", spec requires " + to_string(t.shape()));
    }
    t = stored.as_f32();
  });
  if (next != contents.tensors.size()) {
    throw FormatError("model file '" + path + "': " + std::to_string(contents.tensors.size() - next) +
                      " unexpected extra tensors");
  }
  return model;
}

template ModelT<float> build(const ModelSpec&, std::uint64_t);
template ModelT<double> build(const ModelSpec&, std::uint64_t);
template ForwardResult<float> forward(const ModelT<float>&, const Tensor<float>&);
template ForwardResult<double> forward(const ModelT<double>&, const Tensor<double>&);
template ModelT<float> transfer_resolution(const ModelT<float>&, Index);
template ModelT<double> transfer_resolution(const ModelT<double>&, Index);

}  // namespace cmt
