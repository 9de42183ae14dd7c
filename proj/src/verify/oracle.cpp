#include "cmt/verify/oracle.hpp"

#include <cmath>

namespace cmt::oracle {

namespace {

Index at4(const Shape& s, Index n, Index y, Index x, Index c) {
  return ((n * s[1] + y) * s[2] + x) * s[3] + c;
}

// Catmull-Rom in expanded polynomial form.
double catmull_rom(double t) {
  const double a = std::fabs(t);
  if (a < 1.0) return 1.5 * a * a * a - 2.5 * a * a + 1.0;
  if (a < 2.0) return -0.5 * a * a * a + 2.5 * a * a - 4.0 * a + 2.0;
  return 0.0;
}

Index clamp_index(Index i, Index n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); }

// Depthwise k x k stride-k window sums over a map zero-extended to multiples of k.
Tensord reduce(const Tensord& x, const ConvWeights<double>& w, Index k) {
  const Shape& s = x.shape();
  const Index oh = (s[1] + k - 1) / k, ow = (s[2] + k - 1) / k;
  Tensord out({s[0], oh, ow, s[3]});
  for (Index n = 0; n < s[0]; ++n)
    for (Index by = 0; by < oh; ++by)
      for (Index bx = 0; bx < ow; ++bx)
        for (Index c = 0; c < s[3]; ++c) {
          double acc = w.bias[c];
          for (Index dy = 0; dy < k; ++dy)
            for (Index dx = 0; dx < k; ++dx) {
              const Index y = by * k + dy, xx = bx * k + dx;
              if (y < s[1] && xx < s[2]) acc += x[at4(s, n, y, xx, c)] * w.kernel[(dy * k + dx) * s[3] + c];
            }
          out[at4(out.shape(), n, by, bx, c)] = acc;
        }
  return out;
}

}  // namespace

Tensord matmul(const Tensord& a, const Tensord& b) {
  const Index r = a.dim(0), inner = a.dim(1), c = b.dim(1);
  Tensord out({r, c});
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) {
      double acc = 0;
      for (Index t = 0; t < inner; ++t) acc += a[i * inner + t] * b[t * c + j];
      out[i * c + j] = acc;
    }
  return out;
}

Tensord linear(const Tensord& x, const Linear<double>& p) {
  const Index din = p.weight.dim(0), dout = p.weight.dim(1), rows = x.size() / din;
  Shape shape = x.shape();
  shape.back() = dout;
  Tensord out(shape);
  for (Index r = 0; r < rows; ++r)
    for (Index o = 0; o < dout; ++o) {
      double acc = p.bias.empty() ? 0.0 : p.bias[o];
      for (Index i = 0; i < din; ++i) acc += x[r * din + i] * p.weight[i * dout + o];
      out[r * dout + o] = acc;
    }
  return out;
}

Tensord conv2d(const Tensord& x, const ConvWeights<double>& w) {
  const Shape& s = x.shape();
  const Index kh = w.kernel.dim(0), kw = w.kernel.dim(1), cin = s[3], cout = w.kernel.dim(3);
  const Index oh = (s[1] + w.padding.top + w.padding.bottom - kh) / w.stride + 1;
  const Index ow = (s[2] + w.padding.left + w.padding.right - kw) / w.stride + 1;
  Tensord out({s[0], oh, ow, cout});
  for (Index n = 0; n < s[0]; ++n)
    for (Index oy = 0; oy < oh; ++oy)
      for (Index ox = 0; ox < ow; ++ox)
        for (Index co = 0; co < cout; ++co) {
          double acc = w.bias.empty() ? 0.0 : w.bias[co];
          for (Index ky = 0; ky < kh; ++ky)
            for (Index kx = 0; kx < kw; ++kx) {
              const Index y = oy * w.stride - w.padding.top + ky;
              const Index xx = ox * w.stride - w.padding.left + kx;
              if (y < 0 || y >= s[1] || xx < 0 || xx >= s[2]) continue;
              for (Index ci = 0; ci < cin; ++ci) {
                acc += x[at4(s, n, y, xx, ci)] * w.kernel[((ky * kw + kx) * cin + ci) * cout + co];
              }
            }
          out[at4(out.shape(), n, oy, ox, co)] = acc;
        }
  return out;
}

Tensord dwconv2d(const Tensord& x, const ConvWeights<double>& w) {
  const Shape& s = x.shape();
  const Index kh = w.kernel.dim(0), kw = w.kernel.dim(1), c = s[3];
  const Index oh = (s[1] + w.padding.top + w.padding.bottom - kh) / w.stride + 1;
  const Index ow = (s[2] + w.padding.left + w.padding.right - kw) / w.stride + 1;
  Tensord out({s[0], oh, ow, c});
  for (Index n = 0; n < s[0]; ++n)
    for (Index oy = 0; oy < oh; ++oy)
      for (Index ox = 0; ox < ow; ++ox)
        for (Index ch = 0; ch < c; ++ch) {
          double acc = w.bias.empty() ? 0.0 : w.bias[ch];
          for (Index ky = 0; ky < kh; ++ky)
            for (Index kx = 0; kx < kw; ++kx) {
              const Index y = oy * w.stride - w.padding.top + ky;
              const Index xx = ox * w.stride - w.padding.left + kx;
              if (y < 0 || y >= s[1] || xx < 0 || xx >= s[2]) continue;
              acc += x[at4(s, n, y, xx, ch)] * w.kernel[(ky * kw + kx) * c + ch];
            }
          out[at4(out.shape(), n, oy, ox, ch)] = acc;
        }
  return out;
}

Tensord softmax_rows(const Tensord& x) {
  const Index d = x.dim(-1), rows = x.size() / d;
  Tensord out(x.shape());
  for (Index r = 0; r < rows; ++r) {
    double top = x[r * d];
    for (Index i = 1; i < d; ++i) top = std::fmax(top, x[r * d + i]);
    double sum = 0;
    for (Index i = 0; i < d; ++i) sum += std::exp(x[r * d + i] - top);
    for (Index i = 0; i < d; ++i) out[r * d + i] = std::exp(x[r * d + i] - top) / sum;
  }
  return out;
}

double gelu(double x) { return 0.5 * x * std::erfc(-x / std::sqrt(2.0)); }

Tensord gelu(const Tensord& x) {
  Tensord out(x.shape());
  for (Index i = 0; i < x.size(); ++i) out[i] = gelu(x[i]);
  return out;
}

Tensord layer_norm(const Tensord& x, const LayerNormParams<double>& p, double eps) {
  const Index d = x.dim(-1), rows = x.size() / d;
  Tensord out(x.shape());
  for (Index r = 0; r < rows; ++r) {
    double mean = 0;
    for (Index i = 0; i < d; ++i) mean += x[r * d + i];
    mean /= static_cast<double>(d);
    double var = 0;
    for (Index i = 0; i < d; ++i) var += (x[r * d + i] - mean) * (x[r * d + i] - mean);
    var /= static_cast<double>(d);
    for (Index i = 0; i < d; ++i) {
      out[r * d + i] = (x[r * d + i] - mean) / std::sqrt(var + eps) * p.gamma[i] + p.beta[i];
    }
  }
  return out;
}

Tensord batch_norm(const Tensord& x, const BatchNormParams<double>& p, double eps) {
  const Index c = x.dim(-1);
  Tensord out(x.shape());
  for (Index i = 0; i < x.size(); ++i) {
    const Index ch = i % c;
    out[i] = p.gamma[ch] * (x[i] - p.running_mean[ch]) / std::sqrt(p.running_var[ch] + eps) + p.beta[ch];
  }
  return out;
}

Tensord global_avg_pool(const Tensord& x) {
  const Shape& s = x.shape();
  Tensord out({s[0], s[3]});
  for (Index n = 0; n < s[0]; ++n)
    for (Index c = 0; c < s[3]; ++c) {
      double acc = 0;
      for (Index y = 0; y < s[1]; ++y)
        for (Index xx = 0; xx < s[2]; ++xx) acc += x[at4(s, n, y, xx, c)];
      out[n * s[3] + c] = acc / static_cast<double>(s[1] * s[2]);
    }
  return out;
}

Tensord bicubic_resize(const Tensord& m, Index out_h, Index out_w) {
  const Index h = m.dim(0), w = m.dim(1);
  Tensord out({out_h, out_w});
  for (Index r = 0; r < out_h; ++r)
    for (Index c = 0; c < out_w; ++c) {
      const double sy = out_h > 1 ? static_cast<double>(r * (h - 1)) / static_cast<double>(out_h - 1) : 0.0;
      const double sx = out_w > 1 ? static_cast<double>(c * (w - 1)) / static_cast<double>(out_w - 1) : 0.0;
      const auto fy = static_cast<Index>(std::floor(sy)), fx = static_cast<Index>(std::floor(sx));
      double acc = 0;
      for (Index iy = fy - 1; iy <= fy + 2; ++iy)
        for (Index ix = fx - 1; ix <= fx + 2; ++ix) {
          const double wgt = catmull_rom(sy - static_cast<double>(iy)) * catmull_rom(sx - static_cast<double>(ix));
          acc += wgt * m[clamp_index(iy, h) * w + clamp_index(ix, w)];
        }
      out[r * out_w + c] = acc;
    }
  return out;
}

Tensord permute(const Tensord& x, const std::vector<Index>& axes) {
  const std::size_t rank = axes.size();
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.shape()[static_cast<std::size_t>(axes[i])];
  Tensord out(out_shape);
  std::vector<Index> src(rank);
  for (Index flat = 0; flat < out.size(); ++flat) {
    // Decompose the output index, scatter each coordinate to its source axis.
    Index rem = flat;
    for (std::size_t i = rank; i-- > 0;) {
      src[static_cast<std::size_t>(axes[i])] = rem % out_shape[i];
      rem /= out_shape[i];
    }
    Index off = 0;
    for (std::size_t i = 0; i < rank; ++i) off = off * x.shape()[i] + src[i];
    out[flat] = x[off];
  }
  return out;
}

Tensord attention(const Tensord& q, const Tensord& k, const Tensord& v) {
  const Index n = q.dim(0), m = k.dim(0), dk = q.dim(1), dv = v.dim(1);
  Tensord out({n, dv});
  std::vector<double> a(static_cast<std::size_t>(m));
  for (Index i = 0; i < n; ++i) {
    double top = -INFINITY;
    for (Index j = 0; j < m; ++j) {
      double dot = 0;
      for (Index t = 0; t < dk; ++t) dot += q[i * dk + t] * k[j * dk + t];
      a[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<double>(dk));
      top = std::fmax(top, a[static_cast<std::size_t>(j)]);
    }
    double sum = 0;
    for (auto& e : a) sum += (e = std::exp(e - top));
    for (Index t = 0; t < dv; ++t) {
      double acc = 0;
      for (Index j = 0; j < m; ++j) acc += a[static_cast<std::size_t>(j)] / sum * v[j * dv + t];
      out[i * dv + t] = acc;
    }
  }
  return out;
}

Tensord lpu(const LPUParams<double>& p, const Tensord& x) {
  if (p.dw.kernel.empty()) return x;
  Tensord y = dwconv2d(x, p.dw);
  if (p.shortcut)
    for (Index i = 0; i < y.size(); ++i) y[i] += x[i];
  return y;
}

Tensord lmhsa(const LMHSAParams<double>& p, const Tensord& rel_bias, const Tensord& x) {
  const Shape& s = x.shape();
  const Index batch = s[0], d = s[3], heads = p.heads, dh = d / heads, k = p.reduction;
  const Index n = s[1] * s[2];
  const Tensord q = linear(x, p.q);
  const Tensord keys = linear(k > 1 ? reduce(x, p.dw_k, k) : x, p.k);
  const Tensord vals = linear(k > 1 ? reduce(x, p.dw_v, k) : x, p.v);
  const Index m = keys.dim(1) * keys.dim(2);

  Tensord concat(s);
  std::vector<double> a(static_cast<std::size_t>(m));
  for (Index b = 0; b < batch; ++b)
    for (Index h = 0; h < heads; ++h)
      for (Index i = 0; i < n; ++i) {
        double top = -INFINITY;
        for (Index j = 0; j < m; ++j) {
          double dot = 0;
          for (Index t = 0; t < dh; ++t) dot += q[(b * n + i) * d + h * dh + t] * keys[(b * m + j) * d + h * dh + t];
          double logit = dot / std::sqrt(static_cast<double>(dh));
          if (!rel_bias.empty()) logit += rel_bias[(h * n + i) * m + j];
          a[static_cast<std::size_t>(j)] = logit;
          top = std::fmax(top, logit);
        }
        double sum = 0;
        for (auto& e : a) sum += (e = std::exp(e - top));
        for (Index t = 0; t < dh; ++t) {
          double acc = 0;
          for (Index j = 0; j < m; ++j) acc += a[static_cast<std::size_t>(j)] * vals[(b * m + j) * d + h * dh + t];
          concat[(b * n + i) * d + h * dh + t] = acc / sum;
        }
      }
  return linear(concat, p.o);
}

Tensord ffn(const FFNParams<double>& p, const Tensord& x) { return linear(gelu(linear(x, p.fc1)), p.fc2); }

Tensord irffn(const IRFFNParams<double>& p, const Tensord& x, double eps) {
  const Tensord hidden = batch_norm(gelu(linear(x, p.expand)), p.bn1, eps);
  Tensord local = dwconv2d(hidden, p.dw);
  if (p.shortcut)
    for (Index i = 0; i < local.size(); ++i) local[i] += hidden[i];
  return batch_norm(linear(batch_norm(gelu(local), p.bn2, eps), p.project), p.bn3, eps);
}

Tensord cmt_block(const CMTBlockParams<double>& p, const Tensord& rel_bias, const Tensord& x, double eps) {
  const Tensord x1 = lpu(p.lpu, x);
  Tensord x2 = lmhsa(p.attn, rel_bias, layer_norm(x1, p.ln1, eps));
  for (Index i = 0; i < x2.size(); ++i) x2[i] += x1[i];
  Tensord out = irffn(p.ffn, layer_norm(x2, p.ln2, eps), eps);
  for (Index i = 0; i < out.size(); ++i) out[i] += x2[i];
  return out;
}

Tensord stem(const StemParams<double>& p, const Tensord& x, double eps) {
  Tensord y = x;
  for (int i = 0; i < 3; ++i) y = gelu(batch_norm(conv2d(y, p.conv[i]), p.bn[i], eps));
  return y;
}

Tensord patch_agg(const PatchAggParams<double>& p, const Tensord& x, double eps) {
  return layer_norm(conv2d(x, p.conv), p.ln, eps);
}

Tensord model_logits(const ModelT<double>& model, const Tensord& x) {
  Tensord h = stem(model.stem, x);
  for (const auto& stage : model.stages) {
    h = patch_agg(stage.agg, h);
    for (const auto& block : stage.blocks) h = cmt_block(block, stage.rel_bias, h);
  }
  return linear(gelu(linear(global_avg_pool(h), model.head.fc)), model.head.classifier);
}

}  // namespace cmt::oracle
