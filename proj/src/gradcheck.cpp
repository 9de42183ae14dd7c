#include "cmt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "cmt/grad.hpp"
#include "cmt/rng.hpp"

namespace cmt {

namespace {

using Vars = std::vector<GradVar>;
using Grads = std::vector<Tensord>;

// ---- random parameter sets ------------------------------------------------

Index pick(Rng& rng, Index lo, Index hi) { return lo + rng.below(hi - lo + 1); }

Tensord normal(Shape s, Rng& rng, double std = 1.0) { return random_normal<double>(std::move(s), rng, std); }

Linear<double> rand_linear(Rng& rng, Index din, Index dout) {
  return {normal({din, dout}, rng, 1.0 / std::sqrt(static_cast<double>(din))), normal({dout}, rng, 0.1)};
}

ConvWeights<double> rand_conv(Rng& rng, Index k, Index cin, Index cout, Index stride, Padding pad) {
  return {normal({k, k, cin, cout}, rng, 1.0 / std::sqrt(static_cast<double>(k * k * cin))),
          normal({cout}, rng, 0.1), stride, pad};
}

ConvWeights<double> rand_dw(Rng& rng, Index k, Index c, Index stride, Padding pad) {
  return {normal({k, k, c}, rng, 0.5), normal({c}, rng, 0.1), stride, pad};
}

LayerNormParams<double> rand_ln(Rng& rng, Index d) {
  Tensord gamma = normal({d}, rng, 0.2);
  gamma.array() += 1.0;
  return {std::move(gamma), normal({d}, rng, 0.1)};
}

BatchNormParams<double> rand_bn(Rng& rng, Index c) {
  Tensord gamma = normal({c}, rng, 0.2);
  gamma.array() += 1.0;
  return {std::move(gamma), normal({c}, rng, 0.1), normal({c}, rng, 0.1),
          random_uniform<double>({c}, rng, 0.5, 1.5)};
}

LMHSAParams<double> rand_lmhsa(Rng& rng, Index d, Index heads, Index k) {
  LMHSAParams<double> p;
  p.q = rand_linear(rng, d, d);
  p.k = rand_linear(rng, d, d);
  p.v = rand_linear(rng, d, d);
  p.o = rand_linear(rng, d, d);
  if (k > 1) {
    p.dw_k = rand_dw(rng, k, d, k, {});
    p.dw_v = rand_dw(rng, k, d, k, {});
  }
  p.heads = heads;
  p.reduction = k;
  return p;
}

IRFFNParams<double> rand_irffn(Rng& rng, Index d, Index e) {
  IRFFNParams<double> p;
  p.expand = rand_linear(rng, d, e);
  p.bn1 = rand_bn(rng, e);
  p.dw = rand_dw(rng, 3, e, 1, Padding::same(3, 3));
  p.bn2 = rand_bn(rng, e);
  p.project = rand_linear(rng, e, d);
  p.bn3 = rand_bn(rng, d);
  return p;
}

Padding rand_padding(Rng& rng, Index k) {
  return {pick(rng, 0, k - 1), pick(rng, 0, k - 1), pick(rng, 0, k - 1), pick(rng, 0, k - 1)};
}

// ---- binding structured parameters to flat variables ----------------------

template <typename P, typename V>
void pack(Vars& vars, P p, V visit) {
  visit(p, [&](const std::string& name, Tensord& t, bool learnable) {
    const bool dead = name.ends_with("attn.k.bias") || name.ends_with("attn.dw_k.bias");
    vars.push_back({name, t, learnable, dead});
  });
}

template <typename P, typename V>
std::size_t unpack(const Vars& vars, std::size_t at, P& p, V visit) {
  visit(p, [&](const std::string&, Tensord& t, bool) { t = vars.at(at++).value; });
  return at;
}

template <typename P, typename V>
void append(Grads& out, P& g, V visit) {
  visit(g, [&](const std::string&, Tensord& t, bool) { out.push_back(t); });
}

template <typename F>
auto visitor(F visit_fn, std::string prefix) {
  return [visit_fn, prefix](auto& p, auto&& f) { visit_fn(prefix, p, f); };
}

#define CMT_VISITOR(fn, prefix) \
  visitor([](const std::string& n, auto& p, auto& f) { params::fn(n, p, f); }, prefix)

// A unary op y = fwd(P, x) with ParamVjp-style backward.
template <typename P, typename V, typename Fwd, typename Bwd>
GradProblem param_problem(Tensord x, P proto, V visit, Fwd fwd, Bwd bwd) {
  GradProblem prob;
  prob.vars.push_back({"x", std::move(x), true});
  pack(prob.vars, proto, visit);
  auto bind = [proto, visit](const Vars& vars) {
    P p = proto;
    unpack(vars, 1, p, visit);
    return p;
  };
  prob.forward = [bind, fwd](const Vars& vars) { return fwd(bind(vars), vars[0].value); };
  prob.vjp = [bind, bwd, visit](const Vars& vars, const Tensord& g) {
    auto r = bwd(bind(vars), vars[0].value, g);
    Grads out{std::move(r.input)};
    append(out, r.params, visit);
    return out;
  };
  return prob;
}

// As param_problem, with the relative bias as the last variable.
template <typename P, typename V, typename Fwd, typename Bwd>
GradProblem biased_problem(Tensord x, P proto, Tensord bias, V visit, Fwd fwd, Bwd bwd) {
  GradProblem prob;
  prob.vars.push_back({"x", std::move(x), true});
  pack(prob.vars, proto, visit);
  prob.vars.push_back({"rel_bias", std::move(bias), true});
  auto bind = [proto, visit](const Vars& vars) {
    P p = proto;
    unpack(vars, 1, p, visit);
    return p;
  };
  prob.forward = [bind, fwd](const Vars& vars) {
    return fwd(bind(vars), vars.back().value, vars[0].value);
  };
  prob.vjp = [bind, bwd, visit](const Vars& vars, const Tensord& g) {
    auto r = bwd(bind(vars), vars.back().value, vars[0].value, g);
    Grads out{std::move(r.input)};
    append(out, r.params, visit);
    out.push_back(std::move(r.rel_bias));
    return out;
  };
  return prob;
}

GradProblem unary_problem(Tensord x, std::function<Tensord(const Tensord&)> fwd,
                          std::function<Tensord(const Tensord&, const Tensord&)> bwd) {
  GradProblem prob;
  prob.vars.push_back({"x", std::move(x), true});
  prob.forward = [fwd](const Vars& v) { return fwd(v[0].value); };
  prob.vjp = [bwd](const Vars& v, const Tensord& g) { return Grads{bwd(v[0].value, g)}; };
  return prob;
}

Shape rand_nhwc(Rng& rng, Index max_n, Index lo, Index hi, Index c) {
  return {pick(rng, 1, max_n), pick(rng, lo, hi), pick(rng, lo, hi), c};
}

// ---- samplers -------------------------------------------------------------

GradProblem sample_matmul(std::uint64_t seed) {
  Rng rng(seed);
  const Index m = pick(rng, 1, 6), p = pick(rng, 1, 6), q = pick(rng, 1, 6);
  GradProblem prob;
  prob.vars = {{"a", normal({m, p}, rng), true}, {"b", normal({p, q}, rng), true}};
  prob.forward = [](const Vars& v) { return matmul(v[0].value, v[1].value); };
  prob.vjp = [](const Vars& v, const Tensord& g) {
    auto r = matmul_vjp(v[0].value, v[1].value, g);
    return Grads{std::move(r.a), std::move(r.b)};
  };
  return prob;
}

GradProblem sample_linear(std::uint64_t seed) {
  Rng rng(seed);
  const Index din = pick(rng, 1, 6), dout = pick(rng, 1, 6);
  Shape xs{pick(rng, 1, 3), pick(rng, 1, 3), din};
  return param_problem(
      normal(xs, rng), rand_linear(rng, din, dout), CMT_VISITOR(visit_linear, "linear"),
      [](const Linear<double>& p, const Tensord& x) { return linear(x, p); },
      [](const Linear<double>& p, const Tensord& x, const Tensord& g) { return linear_vjp(x, p, g); });
}

GradProblem sample_conv2d(std::uint64_t seed) {
  Rng rng(seed);
  const Index k = pick(rng, 1, 3), cin = pick(rng, 1, 3), cout = pick(rng, 1, 4);
  const Index stride = pick(rng, 1, 2);
  const Padding pad = rand_padding(rng, k);
  return param_problem(
      normal(rand_nhwc(rng, 2, 3, 6, cin), rng), rand_conv(rng, k, cin, cout, stride, pad),
      CMT_VISITOR(visit_conv, "conv"),
      [](const ConvWeights<double>& p, const Tensord& x) { return conv2d(x, p); },
      [](const ConvWeights<double>& p, const Tensord& x, const Tensord& g) { return conv2d_vjp(x, p, g); });
}

GradProblem sample_dwconv2d(std::uint64_t seed) {
  Rng rng(seed);
  const Index k = pick(rng, 1, 3), c = pick(rng, 1, 4), stride = pick(rng, 1, 2);
  const Padding pad = rand_padding(rng, k);
  return param_problem(
      normal(rand_nhwc(rng, 2, 3, 6, c), rng), rand_dw(rng, k, c, stride, pad),
      CMT_VISITOR(visit_conv, "dw"),
      [](const ConvWeights<double>& p, const Tensord& x) { return dwconv2d(x, p); },
      [](const ConvWeights<double>& p, const Tensord& x, const Tensord& g) { return dwconv2d_vjp(x, p, g); });
}

GradProblem sample_softmax(std::uint64_t seed) {
  Rng rng(seed);
  return unary_problem(
      normal({pick(rng, 1, 4), pick(rng, 1, 6)}, rng, 2.0), [](const Tensord& x) { return softmax_rows(x); },
      [](const Tensord& x, const Tensord& g) { return softmax_rows_vjp(softmax_rows(x), g); });
}

GradProblem sample_gelu(std::uint64_t seed) {
  Rng rng(seed);
  return unary_problem(normal({pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 4)}, rng, 2.0),
                       [](const Tensord& x) { return gelu(x); },
                       [](const Tensord& x, const Tensord& g) { return gelu_vjp(x, g); });
}

GradProblem sample_layer_norm(std::uint64_t seed) {
  Rng rng(seed);
  const Index d = pick(rng, 2, 8);
  return param_problem(
      normal({pick(rng, 1, 4), d}, rng), rand_ln(rng, d), CMT_VISITOR(visit_layer_norm, "ln"),
      [](const LayerNormParams<double>& p, const Tensord& x) { return layer_norm(x, p); },
      [](const LayerNormParams<double>& p, const Tensord& x, const Tensord& g) {
        return layer_norm_vjp(x, p, g);
      });
}

GradProblem sample_batch_norm(std::uint64_t seed) {
  Rng rng(seed);
  const Index c = pick(rng, 1, 5);
  return param_problem(
      normal(rand_nhwc(rng, 2, 1, 3, c), rng), rand_bn(rng, c), CMT_VISITOR(visit_batch_norm, "bn"),
      [](const BatchNormParams<double>& p, const Tensord& x) { return batch_norm_infer(x, p); },
      [](const BatchNormParams<double>& p, const Tensord& x, const Tensord& g) {
        return batch_norm_infer_vjp(x, p, g);
      });
}

GradProblem sample_gap(std::uint64_t seed) {
  Rng rng(seed);
  return unary_problem(normal(rand_nhwc(rng, 2, 1, 4, pick(rng, 1, 4)), rng),
                       [](const Tensord& x) { return global_avg_pool(x); },
                       [](const Tensord& x, const Tensord& g) { return global_avg_pool_vjp(x.shape(), g); });
}

GradProblem sample_bicubic(std::uint64_t seed) {
  Rng rng(seed);
  const Index oh = pick(rng, 1, 8), ow = pick(rng, 1, 8);
  return unary_problem(normal({pick(rng, 1, 6), pick(rng, 1, 6)}, rng),
                       [oh, ow](const Tensord& x) { return bicubic_resize(x, oh, ow); },
                       [](const Tensord& x, const Tensord& g) { return bicubic_resize_vjp(x.shape(), g); });
}

GradProblem sample_permute(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Index> axes{0, 1, 2, 3};
  for (Index i = 3; i > 0; --i) std::swap(axes[static_cast<std::size_t>(i)], axes[static_cast<std::size_t>(rng.below(i + 1))]);
  return unary_problem(normal({pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)}, rng),
                       [axes](const Tensord& x) { return permute(x, axes); },
                       [axes](const Tensord&, const Tensord& g) { return permute_vjp(axes, g); });
}

GradProblem sample_reshape(std::uint64_t seed) {
  Rng rng(seed);
  const Index a = pick(rng, 1, 4), b = pick(rng, 1, 4), c = pick(rng, 1, 4);
  return unary_problem(normal({1, a, b, c}, rng), [a, b, c](const Tensord& x) { return reshape(x, {a * b, c}); },
                       [](const Tensord& x, const Tensord& g) { return reshape(g, x.shape()); });
}

GradProblem sample_add(std::uint64_t seed) {
  Rng rng(seed);
  const Shape s{pick(rng, 1, 3), pick(rng, 1, 4)};
  GradProblem prob;
  prob.vars = {{"a", normal(s, rng), true}, {"b", normal(s, rng), true}};
  prob.forward = [](const Vars& v) { return v[0].value + v[1].value; };
  prob.vjp = [](const Vars&, const Tensord& g) { return Grads{g, g}; };
  return prob;
}

GradProblem sample_attention(std::uint64_t seed) {
  Rng rng(seed);
  const Index n = pick(rng, 1, 5), m = pick(rng, 1, 5), dk = pick(rng, 1, 4), dv = pick(rng, 1, 4);
  GradProblem prob;
  prob.vars = {{"q", normal({n, dk}, rng), true}, {"k", normal({m, dk}, rng), true},
               {"v", normal({m, dv}, rng), true}};
  prob.forward = [](const Vars& v) { return attention_baseline(v[0].value, v[1].value, v[2].value); };
  prob.vjp = [](const Vars& v, const Tensord& g) {
    auto r = attention_baseline_vjp(v[0].value, v[1].value, v[2].value, g);
    return Grads{std::move(r.q), std::move(r.k), std::move(r.v)};
  };
  return prob;
}

GradProblem sample_lpu(std::uint64_t seed) {
  Rng rng(seed);
  const Index d = pick(rng, 1, 4);
  LPUParams<double> p{rand_dw(rng, 3, d, 1, Padding::same(3, 3))};
  return param_problem(
      normal(rand_nhwc(rng, 2, 2, 5, d), rng), p, CMT_VISITOR(visit_lpu, "lpu"),
      [](const LPUParams<double>& p, const Tensord& x) { return lpu_forward(p, x); },
      [](const LPUParams<double>& p, const Tensord& x, const Tensord& g) { return lpu_vjp(p, x, g); });
}

GradProblem sample_lmhsa(std::uint64_t seed) {
  Rng rng(seed);
  const Index heads = pick(rng, 1, 2), d = heads * pick(rng, 1, 3);
  const Index k = std::array<Index, 3>{1, 2, 4}[static_cast<std::size_t>(rng.below(3))];
  const Shape xs = rand_nhwc(rng, 2, 2, 5, d);
  const Index n = xs[1] * xs[2], m = reduced_extent(xs[1], k) * reduced_extent(xs[2], k);
  auto p = rand_lmhsa(rng, d, heads, k);
  Tensord x = normal(xs, rng);
  return biased_problem(
      std::move(x), p, normal({heads, n, m}, rng, 0.5), CMT_VISITOR(visit_lmhsa, "attn"),
      [](const LMHSAParams<double>& p, const Tensord& b, const Tensord& x) { return lmhsa_forward(p, b, x); },
      [](const LMHSAParams<double>& p, const Tensord& b, const Tensord& x, const Tensord& g) {
        return lmhsa_vjp(p, b, x, g);
      });
}

GradProblem sample_ffn(std::uint64_t seed) {
  Rng rng(seed);
  const Index d = pick(rng, 1, 4);
  FFNParams<double> p{rand_linear(rng, d, 4 * d), rand_linear(rng, 4 * d, d)};
  return param_problem(
      normal({pick(rng, 1, 5), d}, rng), p, CMT_VISITOR(visit_ffn, "ffn"),
      [](const FFNParams<double>& p, const Tensord& x) { return ffn_baseline(p, x); },
      [](const FFNParams<double>& p, const Tensord& x, const Tensord& g) { return ffn_baseline_vjp(p, x, g); });
}

GradProblem sample_irffn(std::uint64_t seed) {
  Rng rng(seed);
  const Index d = pick(rng, 1, 4), e = pick(rng, d, 4 * d);
  return param_problem(
      normal(rand_nhwc(rng, 2, 2, 4, d), rng), rand_irffn(rng, d, e), CMT_VISITOR(visit_irffn, "ffn"),
      [](const IRFFNParams<double>& p, const Tensord& x) { return irffn_forward(p, x); },
      [](const IRFFNParams<double>& p, const Tensord& x, const Tensord& g) { return irffn_vjp(p, x, g); });
}

GradProblem sample_block(std::uint64_t seed) {
  Rng rng(seed);
  const Index heads = pick(rng, 1, 2), d = heads * pick(rng, 1, 3), k = pick(rng, 1, 2);
  const Shape xs = rand_nhwc(rng, 1, 2, 4, d);
  const Index n = xs[1] * xs[2], m = reduced_extent(xs[1], k) * reduced_extent(xs[2], k);
  CMTBlockParams<double> p;
  p.lpu.dw = rand_dw(rng, 3, d, 1, Padding::same(3, 3));
  p.ln1 = rand_ln(rng, d);
  p.attn = rand_lmhsa(rng, d, heads, k);
  p.ln2 = rand_ln(rng, d);
  p.ffn = rand_irffn(rng, d, pick(rng, d, 4 * d));
  Tensord x = normal(xs, rng);
  return biased_problem(
      std::move(x), p, normal({heads, n, m}, rng, 0.5), CMT_VISITOR(visit_block, "block"),
      [](const CMTBlockParams<double>& p, const Tensord& b, const Tensord& x) {
        return cmt_block_forward(p, b, x);
      },
      [](const CMTBlockParams<double>& p, const Tensord& b, const Tensord& x, const Tensord& g) {
        return cmt_block_vjp(p, b, x, g);
      });
}

GradProblem sample_stem(std::uint64_t seed) {
  Rng rng(seed);
  const Index c = pick(rng, 1, 3);
  StemParams<double> p;
  for (int i = 0; i < 3; ++i) {
    p.conv[i] = rand_conv(rng, 3, i == 0 ? 3 : c, c, i == 0 ? 2 : 1, Padding::same(3, 3));
    p.bn[i] = rand_bn(rng, c);
  }
  const Index side = 2 * pick(rng, 1, 3);
  return param_problem(
      normal({1, side, side, 3}, rng), p, CMT_VISITOR(visit_stem, "stem"),
      [](const StemParams<double>& p, const Tensord& x) { return stem_forward(p, x); },
      [](const StemParams<double>& p, const Tensord& x, const Tensord& g) { return stem_vjp(p, x, g); });
}

GradProblem sample_patch_agg(std::uint64_t seed) {
  Rng rng(seed);
  const Index cin = pick(rng, 1, 3), cout = pick(rng, 2, 5);
  PatchAggParams<double> p{rand_conv(rng, 2, cin, cout, 2, {}), rand_ln(rng, cout)};
  const Index side = 2 * pick(rng, 1, 3);
  return param_problem(
      normal({pick(rng, 1, 2), side, side, cin}, rng), p, CMT_VISITOR(visit_patch_agg, "agg"),
      [](const PatchAggParams<double>& p, const Tensord& x) { return patch_agg_forward(p, x); },
      [](const PatchAggParams<double>& p, const Tensord& x, const Tensord& g) {
        return patch_agg_vjp(p, x, g);
      });
}

GradProblem sample_model(std::uint64_t seed) {
  ModelSpec spec;
  spec.name = "grad-toy";
  spec.stem_channels = 4;
  const std::array<Index, 4> dims{8, 16, 24, 32}, heads{1, 2, 2, 4}, red{8, 4, 2, 1};
  for (std::size_t i = 0; i < 4; ++i) spec.stages[i] = {1, dims[i], heads[i], red[i], 2.0};
  spec.resolution = 32;
  spec.head_width = 16;
  spec.num_classes = 3;

  // Trained-looking scales: unit-ish weights so every path carries signal.
  ModelT<double> proto = build<double>(spec, seed);
  Rng rng(seed + 1);
  visit_model(proto, [&](const std::string& name, Tensord& t, bool learnable) {
    if (!learnable) return;
    const bool gain = name.ends_with(".gamma");
    for (auto& v : t.values()) v = gain ? 1.0 + 0.2 * rng.normal() : v + 0.2 * rng.normal();
  });

  GradProblem prob;
  prob.vars.push_back({"x", normal({1, 32, 32, 3}, rng), true});
  auto visit = [](auto& m, auto&& f) { visit_model(m, f); };
  pack(prob.vars, proto, visit);
  auto bind = [proto, visit](const Vars& vars) {
    ModelT<double> m = proto;
    unpack(vars, 1, m, visit);
    return m;
  };
  prob.forward = [bind](const Vars& vars) { return forward(bind(vars), vars[0].value).logits; };
  prob.vjp = [bind, visit](const Vars& vars, const Tensord& g) {
    auto r = model_vjp<double>(bind(vars), vars[0].value, [&g](const Tensord&) { return g; });
    Grads out{std::move(r.input)};
    append(out, r.params, visit);
    return out;
  };
  return prob;
}

std::vector<GradOp> make_registry() {
  return {
      {"matmul", sample_matmul},
      {"linear", sample_linear},
      {"conv2d", sample_conv2d},
      {"dwconv2d", sample_dwconv2d},
      {"softmax_rows", sample_softmax},
      {"gelu", sample_gelu},
      {"layer_norm", sample_layer_norm},
      {"batch_norm_infer", sample_batch_norm},
      {"global_avg_pool", sample_gap},
      {"bicubic_resize", sample_bicubic},
      {"permute", sample_permute},
      {"reshape", sample_reshape},
      {"add", sample_add},
      {"attention_baseline", sample_attention},
      {"lpu", sample_lpu},
      {"lmhsa", sample_lmhsa},
      {"ffn_baseline", sample_ffn},
      {"irffn", sample_irffn},
      {"cmt_block", sample_block},
      {"stem", sample_stem},
      {"patch_agg", sample_patch_agg},
      {"model", sample_model},
  };
}

double projection(const Tensord& w, const Tensord& y) {
  if (w.shape() != y.shape()) throw std::logic_error("gradcheck: forward output changed shape");
  double s = 0;
  for (Index i = 0; i < y.size(); ++i) s += w[i] * y[i];
  return s;
}

}  // namespace

const std::vector<GradOp>& grad_ops() {
  static const std::vector<GradOp> ops = make_registry();
  return ops;
}

std::vector<std::string> grad_op_names() {
  std::vector<std::string> names;
  for (const auto& op : grad_ops()) names.push_back(op.name);
  return names;
}

const GradOp& find_grad_op(const std::string& name) {
  for (const auto& op : grad_ops()) {
    if (op.name == name) return op;
  }
  std::string valid;
  for (const auto& op : grad_ops()) valid += (valid.empty() ? "" : ", ") + op.name;
  throw ConfigError("unknown op '" + name + "'; known ops: " + valid);
}

std::vector<Tensord> vjp(const std::string& op, std::uint64_t seed, const Tensord& cotangent) {
  GradProblem prob = find_grad_op(op).sample(seed);
  return prob.vjp(prob.vars, cotangent);
}

GradOp sign_flipped(const GradOp& op) {
  GradOp out{op.name + "/sign-flipped", {}};
  out.sample = [inner = op.sample](std::uint64_t seed) {
    GradProblem prob = inner(seed);
    prob.vjp = [vjp = prob.vjp](const Vars& vars, const Tensord& g) {
      Grads grads = vjp(vars, g);
      for (auto& t : grads) {
        if (!t.empty()) t.array() = -t.array();
      }
      return grads;
    };
    return prob;
  };
  return out;
}

double GradCheckReport::max_rel() const {
  double worst = 0;
  for (const auto& e : entries) {
    if (!e.zero_grad) worst = std::max(worst, e.max_rel);
  }
  return worst;
}

bool GradCheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [this](const GradCheckEntry& e) { return e.passed(threshold); });
}

int GradCheckReport::probes() const {
  int total = 0;
  for (const auto& e : entries) total += e.probes;
  return total;
}

std::string GradCheckReport::render() const {
  std::ostringstream os;
  os << (passed() ? "PASS" : "FAIL") << "  " << op << " seed=" << seed << " probes=" << probes()
     << " max_rel=" << std::scientific << std::setprecision(2) << max_rel() << " (threshold "
     << threshold << ")\n";
  for (const auto& e : entries) {
    if (e.probes == 0) continue;
    os << "    " << std::left << std::setw(40) << e.name << std::right;
    if (e.zero_grad) {
      os << " zero-gradient, max |d| " << e.max_abs;
    } else {
      os << " rel " << e.max_rel << "  abs " << e.max_abs;
    }
    os << "  n=" << e.probes << (e.passed(threshold) ? "" : "  <-- FAIL") << '\n';
  }
  return os.str();
}

std::string GradCheckReport::to_json() const {
  nlohmann::ordered_json j;
  j["op"] = op;
  j["seed"] = seed;
  j["eps"] = eps;
  j["threshold"] = threshold;
  j["passed"] = passed();
  j["max_rel"] = max_rel();
  auto& list = j["entries"] = nlohmann::ordered_json::array();
  for (const auto& e : entries) {
    list.push_back({{"name", e.name},
                    {"max_rel", e.max_rel},
                    {"max_abs", e.max_abs},
                    {"probes", e.probes},
                    {"zero_grad", e.zero_grad},
                    {"passed", e.passed(threshold)}});
  }
  return j.dump(2);
}

GradCheckReport finite_diff_check(const GradOp& op, std::uint64_t seed, double eps, int probes) {
  GradProblem prob = op.sample(seed);
  Vars vars = prob.vars;
  const Tensord y = prob.forward(vars);
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const Tensord w = random_normal<double>(y.shape(), rng);
  const Grads grads = prob.vjp(vars, w);
  if (grads.size() != vars.size()) {
    throw std::logic_error("gradcheck " + op.name + ": vjp returned " + std::to_string(grads.size()) +
                           " cotangents for " + std::to_string(vars.size()) + " variables");
  }

  GradCheckReport report;
  report.op = op.name;
  report.seed = seed;
  report.eps = eps;
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < vars.size(); ++i) {
    report.entries.push_back({vars[i].name, 0, 0, 0, vars[i].zero_grad});
    if (vars[i].probe) {
      if (grads[i].shape() != vars[i].value.shape()) {
        throw std::logic_error("gradcheck " + op.name + ": cotangent of '" + vars[i].name + "' has shape " +
                               to_string(grads[i].shape()) + ", expected " +
                               to_string(vars[i].value.shape()));
      }
      order.push_back(i);
    }
  }
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(static_cast<Index>(i)))]);
  }
  if (order.empty()) return report;

  for (int p = 0; p < probes; ++p) {
    const std::size_t v = order[static_cast<std::size_t>(p) % order.size()];
    Tensord& t = vars[v].value;
    const Index idx = rng.below(t.size());
    const double orig = t[idx];
    t[idx] = orig + eps;
    const double fp = projection(w, prob.forward(vars));
    t[idx] = orig - eps;
    const double fm = projection(w, prob.forward(vars));
    t[idx] = orig;
    const double numeric = (fp - fm) / (2 * eps);
    const double analytic = grads[v][idx];
    const double abs_err = std::abs(analytic - numeric);
    const double rel = abs_err / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    auto& e = report.entries[v];
    if (e.zero_grad) {
      e.max_abs = std::max({e.max_abs, std::abs(analytic), std::abs(numeric)});
    } else {
      e.max_abs = std::max(e.max_abs, abs_err);
    }
    e.max_rel = std::max(e.max_rel, rel);
    ++e.probes;
  }
  return report;
}

GradCheckReport finite_diff_check(const std::string& op, std::uint64_t seed, double eps, int probes) {
  return finite_diff_check(find_grad_op(op), seed, eps, probes);
}

}  // namespace cmt
