#include "cbd/network.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>

#include "cbd/dataset.hpp"
#include "cbd/errors.hpp"
#include "cbd/rng.hpp"

namespace cbd {

namespace {

// ---- numeric kernels -------------------------------------------------------

// C[M,N] += A[M,K] * B[K,N], row-major. The n-loop is the innermost so the
// compiler can vectorize it without reassociating accumulations.
void gemm_acc(const float* A, const float* B, float* C, int M, int K, int N) {
  for (int m = 0; m < M; ++m) {
    const float* a = A + static_cast<std::size_t>(m) * K;
    float* c = C + static_cast<std::size_t>(m) * N;
    for (int k = 0; k < K; ++k) {
      const float av = a[k];
      const float* b = B + static_cast<std::size_t>(k) * N;
      for (int n = 0; n < N; ++n) c[n] += av * b[n];
    }
  }
}

// Dot product with four independent partial sums (fixed summation order).
float dot4(const float* a, const float* b, int n) {
  float s0 = 0.0f, s1 = 0.0f, s2 = 0.0f, s3 = 0.0f;
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  float s = (s0 + s1) + (s2 + s3);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void im2col(const float* x, int C, int H, int W, int K, int stride, int pad, int OH, int OW,
            float* cols) {
  for (int c = 0; c < C; ++c)
    for (int kr = 0; kr < K; ++kr)
      for (int kc = 0; kc < K; ++kc) {
        float* dst = cols + (static_cast<std::size_t>(c * K + kr) * K + kc) *
                                (static_cast<std::size_t>(OH) * OW);
        for (int oh = 0; oh < OH; ++oh) {
          const int ir = oh * stride - pad + kr;
          float* row = dst + static_cast<std::size_t>(oh) * OW;
          if (ir < 0 || ir >= H) {
            std::fill(row, row + OW, 0.0f);
            continue;
          }
          const float* src = x + (static_cast<std::size_t>(c) * H + ir) * W;
          for (int ow = 0; ow < OW; ++ow) {
            const int ic = ow * stride - pad + kc;
            row[ow] = (ic >= 0 && ic < W) ? src[ic] : 0.0f;
          }
        }
      }
}

void col2im_acc(const float* cols, int C, int H, int W, int K, int stride, int pad, int OH, int OW,
                float* x) {
  for (int c = 0; c < C; ++c)
    for (int kr = 0; kr < K; ++kr)
      for (int kc = 0; kc < K; ++kc) {
        const float* src = cols + (static_cast<std::size_t>(c * K + kr) * K + kc) *
                                      (static_cast<std::size_t>(OH) * OW);
        for (int oh = 0; oh < OH; ++oh) {
          const int ir = oh * stride - pad + kr;
          if (ir < 0 || ir >= H) continue;
          float* dst = x + (static_cast<std::size_t>(c) * H + ir) * W;
          const float* row = src + static_cast<std::size_t>(oh) * OW;
          for (int ow = 0; ow < OW; ++ow) {
            const int ic = ow * stride - pad + kc;
            if (ic >= 0 && ic < W) dst[ic] += row[ow];
          }
        }
      }
}

std::vector<float>& scratch_cols() {
  thread_local std::vector<float> buf;
  return buf;
}

std::string hexfloat(float v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%a", static_cast<double>(v));
  return buf;
}

float parse_hexfloat(const std::string& s) {
  return std::strtof(s.c_str(), nullptr);
}

}  // namespace

// ---- config ----------------------------------------------------------------

NetworkConfig NetworkConfig::reference(int conv1, int conv2, int classes, float bn_momentum,
                                       float bn_epsilon) {
  NetworkConfig cfg;
  cfg.input_shape = {3, 32, 32};
  cfg.classes = classes;
  const BatchNormSpec bn{bn_momentum, bn_epsilon};
  cfg.layers = {ConvSpec{conv1, 3, 1, 1}, bn, ReluSpec{}, MaxPoolSpec{2},
                ConvSpec{conv2, 3, 1, 1}, bn, ReluSpec{}, MaxPoolSpec{2},
                FlattenSpec{},            DenseSpec{classes}};
  return cfg;
}

std::vector<std::vector<int>> NetworkConfig::output_shapes() const {
  if (input_shape.empty()) throw ConfigError("network config: missing input shape");
  std::vector<std::vector<int>> out;
  std::vector<int> cur = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto fail = [&](const std::string& what) {
      throw ConfigError("network config: layer " + std::to_string(i) + ": " + what);
    };
    if (const auto* c = std::get_if<ConvSpec>(&layers[i])) {
      if (cur.size() != 3) fail("conv needs a CxHxW input");
      if (c->out_channels < 1 || c->kernel < 1 || c->stride < 1 || c->pad < 0)
        fail("bad conv spec");
      const int oh = (cur[1] + 2 * c->pad - c->kernel) / c->stride + 1;
      const int ow = (cur[2] + 2 * c->pad - c->kernel) / c->stride + 1;
      if (cur[1] + 2 * c->pad < c->kernel || oh < 1 || ow < 1) fail("conv output collapses");
      cur = {c->out_channels, oh, ow};
    } else if (std::holds_alternative<BatchNormSpec>(layers[i])) {
      if (cur.size() != 3) fail("batchnorm needs a CxHxW input");
    } else if (std::holds_alternative<ReluSpec>(layers[i])) {
      // shape preserved
    } else if (const auto* p = std::get_if<MaxPoolSpec>(&layers[i])) {
      if (cur.size() != 3) fail("maxpool needs a CxHxW input");
      if (p->size < 1 || cur[1] < p->size || cur[2] < p->size) fail("pool window too large");
      cur = {cur[0], cur[1] / p->size, cur[2] / p->size};
    } else if (std::holds_alternative<FlattenSpec>(layers[i])) {
      int n = 1;
      for (const int d : cur) n *= d;
      cur = {n};
    } else if (const auto* d = std::get_if<DenseSpec>(&layers[i])) {
      if (cur.size() != 1) fail("dense needs a flat input");
      if (d->out_features < 1) fail("bad dense spec");
      cur = {d->out_features};
    }
    out.push_back(cur);
  }
  if (out.empty() || out.back().size() != 1 || out.back()[0] != classes)
    throw ConfigError("network config: head does not produce one logit per class");
  return out;
}

std::string NetworkConfig::to_text() const {
  std::ostringstream os;
  os << "input";
  for (const int d : input_shape) os << ' ' << d;
  os << "\nclasses " << classes << '\n';
  for (const auto& l : layers) {
    if (const auto* c = std::get_if<ConvSpec>(&l))
      os << "conv " << c->out_channels << ' ' << c->kernel << ' ' << c->stride << ' ' << c->pad
         << '\n';
    else if (const auto* b = std::get_if<BatchNormSpec>(&l))
      os << "batchnorm " << hexfloat(b->momentum) << ' ' << hexfloat(b->epsilon) << '\n';
    else if (std::holds_alternative<ReluSpec>(l))
      os << "relu\n";
    else if (const auto* p = std::get_if<MaxPoolSpec>(&l))
      os << "maxpool " << p->size << '\n';
    else if (std::holds_alternative<FlattenSpec>(l))
      os << "flatten\n";
    else if (const auto* d = std::get_if<DenseSpec>(&l))
      os << "dense " << d->out_features << '\n';
  }
  return os.str();
}

NetworkConfig NetworkConfig::from_text(const std::string& text) {
  NetworkConfig cfg;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "input") {
      int d;
      while (ls >> d) cfg.input_shape.push_back(d);
    } else if (kind == "classes") {
      ls >> cfg.classes;
    } else if (kind == "conv") {
      ConvSpec c;
      ls >> c.out_channels >> c.kernel >> c.stride >> c.pad;
      cfg.layers.emplace_back(c);
    } else if (kind == "batchnorm") {
      std::string m, e;
      ls >> m >> e;
      cfg.layers.emplace_back(BatchNormSpec{parse_hexfloat(m), parse_hexfloat(e)});
    } else if (kind == "relu") {
      cfg.layers.emplace_back(ReluSpec{});
    } else if (kind == "maxpool") {
      MaxPoolSpec p;
      ls >> p.size;
      cfg.layers.emplace_back(p);
    } else if (kind == "flatten") {
      cfg.layers.emplace_back(FlattenSpec{});
    } else if (kind == "dense") {
      DenseSpec d;
      ls >> d.out_features;
      cfg.layers.emplace_back(d);
    } else {
      throw FormatError("network config: unknown layer kind '" + kind + "'");
    }
    if (ls.fail() && kind != "input") throw FormatError("network config: bad line '" + line + "'");
  }
  cfg.output_shapes();  // validate
  return cfg;
}

// ---- network construction ---------------------------------------------------

Network Network::init(const NetworkConfig& cfg, std::uint64_t seed) {
  const auto shapes = cfg.output_shapes();
  Network net;
  net.config = cfg;
  std::vector<int> cur = cfg.input_shape;
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    Layer layer;
    layer.spec = cfg.layers[i];
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(i)));
    if (const auto* c = std::get_if<ConvSpec>(&cfg.layers[i])) {
      const int fan_in = cur[0] * c->kernel * c->kernel;
      const int fan_out = c->out_channels * c->kernel * c->kernel;
      const double bound = std::sqrt(6.0 / (fan_in + fan_out));
      layer.weight = Tensor({c->out_channels, cur[0], c->kernel, c->kernel});
      for (auto& w : layer.weight.data) w = static_cast<float>(rng.uniform(-bound, bound));
      layer.bias = Tensor({c->out_channels});
    } else if (const auto* b = std::get_if<BatchNormSpec>(&cfg.layers[i])) {
      const int ch = cur[0];
      layer.bn.gamma = Tensor({ch});
      layer.bn.gamma.fill(1.0f);
      layer.bn.beta = Tensor({ch});
      layer.bn.running_mean = Tensor({ch});
      layer.bn.running_var = Tensor({ch});
      layer.bn.running_var.fill(1.0f);
      layer.bn.momentum = b->momentum;
      layer.bn.epsilon = b->epsilon;
    } else if (const auto* d = std::get_if<DenseSpec>(&cfg.layers[i])) {
      const int fan_in = cur[0];
      const int fan_out = d->out_features;
      const double bound = std::sqrt(6.0 / (fan_in + fan_out));
      layer.weight = Tensor({d->out_features, fan_in});
      for (auto& w : layer.weight.data) w = static_cast<float>(rng.uniform(-bound, bound));
      layer.bias = Tensor({d->out_features});
    }
    net.layers.push_back(std::move(layer));
    cur = shapes[i];
  }
  return net;
}

int Network::last_conv_index() const {
  for (int i = static_cast<int>(layers.size()) - 1; i >= 0; --i)
    if (std::holds_alternative<ConvSpec>(layers[static_cast<std::size_t>(i)].spec)) return i;
  return -1;
}

bool Network::has_batchnorm() const {
  for (const auto& l : layers)
    if (std::holds_alternative<BatchNormSpec>(l.spec)) return true;
  return false;
}

namespace {

template <typename Net, typename TensorPtr>
std::vector<std::pair<std::string, TensorPtr>> named_tensors_impl(Net& net) {
  std::vector<std::pair<std::string, TensorPtr>> out;
  int conv_n = 0, bn_n = 0, dense_n = 0;
  for (auto& layer : net.layers) {
    if (std::holds_alternative<ConvSpec>(layer.spec)) {
      const std::string base = "conv" + std::to_string(++conv_n);
      out.emplace_back(base + ".weight", &layer.weight);
      out.emplace_back(base + ".bias", &layer.bias);
    } else if (std::holds_alternative<BatchNormSpec>(layer.spec)) {
      const std::string base = "bn" + std::to_string(++bn_n);
      out.emplace_back(base + ".gamma", &layer.bn.gamma);
      out.emplace_back(base + ".beta", &layer.bn.beta);
      out.emplace_back(base + ".running_mean", &layer.bn.running_mean);
      out.emplace_back(base + ".running_var", &layer.bn.running_var);
    } else if (std::holds_alternative<DenseSpec>(layer.spec)) {
      const std::string base = "dense" + std::to_string(++dense_n);
      out.emplace_back(base + ".weight", &layer.weight);
      out.emplace_back(base + ".bias", &layer.bias);
    }
  }
  return out;
}

}  // namespace

std::vector<std::pair<std::string, Tensor*>> Network::named_tensors() {
  return named_tensors_impl<Network, Tensor*>(*this);
}

std::vector<std::pair<std::string, const Tensor*>> Network::named_tensors() const {
  return named_tensors_impl<const Network, const Tensor*>(*this);
}

Tensor* Network::find_tensor(const std::string& name) {
  for (auto& [n, t] : named_tensors())
    if (n == name) return t;
  return nullptr;
}

// ---- forward ----------------------------------------------------------------

namespace {

void conv_forward(const Layer& layer, const Tensor& x, Tensor& y) {
  const auto& c = std::get<ConvSpec>(layer.spec);
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int OC = c.out_channels;
  const int OH = y.dim(2), OW = y.dim(3);
  const int K = c.kernel;
  const std::size_t col_rows = static_cast<std::size_t>(C) * K * K;
  const std::size_t col_cols = static_cast<std::size_t>(OH) * OW;
  auto& cols = scratch_cols();
  cols.resize(col_rows * col_cols);
  for (int b = 0; b < B; ++b) {
    const float* xb = x.ptr() + static_cast<std::size_t>(b) * C * H * W;
    float* yb = y.ptr() + static_cast<std::size_t>(b) * OC * OH * OW;
    im2col(xb, C, H, W, K, c.stride, c.pad, OH, OW, cols.data());
    for (int oc = 0; oc < OC; ++oc) {
      const float bias = layer.bias.data[static_cast<std::size_t>(oc)];
      float* row = yb + static_cast<std::size_t>(oc) * col_cols;
      std::fill(row, row + col_cols, bias);
    }
    gemm_acc(layer.weight.ptr(), cols.data(), yb, OC, static_cast<int>(col_rows),
             static_cast<int>(col_cols));
  }
}

// Batch statistics are accumulated in double, then cast; the running update
// is the plain float expression new = (1-momentum)*old + momentum*batch.
void bn_forward(Layer& layer, const Tensor& x, Tensor& y, Mode mode, int layer_index,
                ForwardTrace* trace) {
  auto& bn = layer.bn;
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const std::size_t nb = static_cast<std::size_t>(B) * plane;

  Tensor mean({C}), var({C});
  if (mode == Mode::train) {
    if (B < 2) throw ConfigError("batchnorm train mode needs batches of at least 2");
    for (int ch = 0; ch < C; ++ch) {
      double sum = 0.0;
      for (int b = 0; b < B; ++b) {
        const float* p = x.ptr() + (static_cast<std::size_t>(b) * C + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) sum += p[i];
      }
      const float m = static_cast<float>(sum / static_cast<double>(nb));
      double sq = 0.0;
      for (int b = 0; b < B; ++b) {
        const float* p = x.ptr() + (static_cast<std::size_t>(b) * C + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = static_cast<double>(p[i]) - static_cast<double>(m);
          sq += d * d;
        }
      }
      mean.data[static_cast<std::size_t>(ch)] = m;
      var.data[static_cast<std::size_t>(ch)] = static_cast<float>(sq / static_cast<double>(nb));
    }
    for (int ch = 0; ch < C; ++ch) {
      auto& rm = bn.running_mean.data[static_cast<std::size_t>(ch)];
      auto& rv = bn.running_var.data[static_cast<std::size_t>(ch)];
      rm = (1.0f - bn.momentum) * rm + bn.momentum * mean.data[static_cast<std::size_t>(ch)];
      rv = (1.0f - bn.momentum) * rv + bn.momentum * var.data[static_cast<std::size_t>(ch)];
    }
  } else {
    mean = bn.running_mean;
    var = bn.running_var;
  }

  Tensor* xhat = nullptr;
  if (trace) {
    trace->bn_xhat[layer_index] = Tensor(x.shape);
    xhat = &trace->bn_xhat[layer_index];
    if (mode == Mode::train) {
      trace->bn_mean[layer_index] = mean;
      trace->bn_var[layer_index] = var;
    }
  }
  for (int ch = 0; ch < C; ++ch) {
    const float m = mean.data[static_cast<std::size_t>(ch)];
    const float inv = 1.0f / std::sqrt(var.data[static_cast<std::size_t>(ch)] + bn.epsilon);
    const float g = bn.gamma.data[static_cast<std::size_t>(ch)];
    const float be = bn.beta.data[static_cast<std::size_t>(ch)];
    for (int b = 0; b < B; ++b) {
      const std::size_t off = (static_cast<std::size_t>(b) * C + ch) * plane;
      const float* px = x.ptr() + off;
      float* py = y.ptr() + off;
      if (xhat) {
        float* ph = xhat->ptr() + off;
        for (std::size_t i = 0; i < plane; ++i) {
          const float h = (px[i] - m) * inv;
          ph[i] = h;
          py[i] = g * h + be;
        }
      } else {
        for (std::size_t i = 0; i < plane; ++i) py[i] = g * ((px[i] - m) * inv) + be;
      }
    }
  }
}

void maxpool_forward(const MaxPoolSpec& spec, const Tensor& x, Tensor& y, int layer_index,
                     ForwardTrace* trace) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int S = spec.size;
  const int OH = y.dim(2), OW = y.dim(3);
  std::vector<int>* argmax = nullptr;
  if (trace) {
    trace->pool_argmax[layer_index] = std::vector<int>(y.numel());
    argmax = &trace->pool_argmax[layer_index];
  }
  std::size_t oi = 0;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const float* plane = x.ptr() + (static_cast<std::size_t>(b) * C + c) *
                                         (static_cast<std::size_t>(H) * W);
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow, ++oi) {
          float best = plane[static_cast<std::size_t>(oh * S) * W + ow * S];
          int best_idx = oh * S * W + ow * S;
          for (int kr = 0; kr < S; ++kr)
            for (int kc = 0; kc < S; ++kc) {
              const int idx = (oh * S + kr) * W + (ow * S + kc);
              const float v = plane[idx];
              if (v > best) {
                best = v;
                best_idx = idx;
              }
            }
          y.data[oi] = best;
          if (argmax) (*argmax)[oi] = best_idx;
        }
    }
}

}  // namespace

Tensor forward(Network& net, const Tensor& batch, Mode mode, ForwardTrace* trace) {
  const auto& in = net.config.input_shape;
  if (batch.rank() != static_cast<int>(in.size()) + 1)
    throw ConfigError("forward: batch rank mismatch");
  for (std::size_t i = 0; i < in.size(); ++i)
    if (batch.dim(static_cast<int>(i) + 1) != in[i])
      throw ConfigError("forward: batch shape does not match network input shape");

  const int B = batch.dim(0);
  const auto shapes = net.config.output_shapes();
  if (trace) {
    trace->mode = mode;
    trace->acts.clear();
    trace->pool_argmax.clear();
    trace->bn_xhat.clear();
    trace->bn_mean.clear();
    trace->bn_var.clear();
    trace->acts.push_back(batch);
  }

  Tensor cur = batch;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    Layer& layer = net.layers[i];
    std::vector<int> out_shape = {B};
    for (const int d : shapes[i]) out_shape.push_back(d);
    Tensor next(out_shape);
    if (std::holds_alternative<ConvSpec>(layer.spec)) {
      conv_forward(layer, cur, next);
    } else if (std::holds_alternative<BatchNormSpec>(layer.spec)) {
      bn_forward(layer, cur, next, mode, static_cast<int>(i), trace);
    } else if (std::holds_alternative<ReluSpec>(layer.spec)) {
      for (std::size_t j = 0; j < cur.numel(); ++j)
        next.data[j] = cur.data[j] > 0.0f ? cur.data[j] : 0.0f;
    } else if (const auto* p = std::get_if<MaxPoolSpec>(&layer.spec)) {
      maxpool_forward(*p, cur, next, static_cast<int>(i), trace);
    } else if (std::holds_alternative<FlattenSpec>(layer.spec)) {
      next.data = cur.data;
    } else if (std::holds_alternative<DenseSpec>(layer.spec)) {
      const int I = cur.dim(1);
      const int O = next.dim(1);
      for (int b = 0; b < B; ++b) {
        const float* xb = cur.ptr() + static_cast<std::size_t>(b) * I;
        float* yb = next.ptr() + static_cast<std::size_t>(b) * O;
        for (int o = 0; o < O; ++o)
          yb[o] = layer.bias.data[static_cast<std::size_t>(o)] +
                  dot4(layer.weight.ptr() + static_cast<std::size_t>(o) * I, xb, I);
      }
    }
    cur = std::move(next);
    if (trace) trace->acts.push_back(cur);
  }
  return cur;
}

std::pair<Tensor, std::vector<Tensor>> forward_with_activations(Network& net,
                                                                const Tensor& image) {
  if (image.rank() != 3) throw ConfigError("forward_with_activations expects one CxHxW image");
  Tensor batch({1, image.dim(0), image.dim(1), image.dim(2)}, image.data);
  ForwardTrace trace;
  Tensor logits = forward(net, batch, Mode::eval, &trace);
  std::vector<Tensor> acts(trace.acts.begin() + 1, trace.acts.end());
  return {std::move(logits), std::move(acts)};
}

// ---- loss and backward ------------------------------------------------------

float cross_entropy(const Tensor& logits, const std::vector<std::uint16_t>& labels,
                    Tensor* dlogits) {
  const int B = logits.dim(0);
  const int C = logits.dim(1);
  if (static_cast<int>(labels.size()) != B)
    throw InputError("cross_entropy: label count does not match batch");
  if (dlogits) *dlogits = Tensor(logits.shape);
  double total = 0.0;
  for (int b = 0; b < B; ++b) {
    const float* z = logits.ptr() + static_cast<std::size_t>(b) * C;
    if (labels[static_cast<std::size_t>(b)] >= C)
      throw InputError("cross_entropy: label out of range");
    float m = z[0];
    for (int c = 1; c < C; ++c) m = std::max(m, z[c]);
    double sum = 0.0;
    for (int c = 0; c < C; ++c) sum += std::exp(static_cast<double>(z[c] - m));
    const double lse = static_cast<double>(m) + std::log(sum);
    total += lse - static_cast<double>(z[labels[static_cast<std::size_t>(b)]]);
    if (dlogits) {
      float* d = dlogits->ptr() + static_cast<std::size_t>(b) * C;
      for (int c = 0; c < C; ++c) {
        const double p = std::exp(static_cast<double>(z[c]) - lse);
        d[c] = static_cast<float>(p / B);
      }
      d[labels[static_cast<std::size_t>(b)]] -= 1.0f / static_cast<float>(B);
    }
  }
  return static_cast<float>(total / B);
}

namespace {

struct BackwardOut {
  GradientMap grads;
  Tensor dinput;
};

void conv_backward(const Layer& layer, const Tensor& x, const Tensor& dy, Tensor* dx, Tensor* dw,
                   Tensor* db) {
  const auto& c = std::get<ConvSpec>(layer.spec);
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int OC = c.out_channels, OH = dy.dim(2), OW = dy.dim(3);
  const int K = c.kernel;
  const int col_rows = C * K * K;
  const int col_cols = OH * OW;
  auto& cols = scratch_cols();
  cols.resize(static_cast<std::size_t>(col_rows) * col_cols);
  std::vector<float> dcols;
  if (dx) dcols.resize(static_cast<std::size_t>(col_rows) * col_cols);

  for (int b = 0; b < B; ++b) {
    const float* xb = x.ptr() + static_cast<std::size_t>(b) * C * H * W;
    const float* dyb = dy.ptr() + static_cast<std::size_t>(b) * OC * OH * OW;
    if (dw) {
      im2col(xb, C, H, W, K, c.stride, c.pad, OH, OW, cols.data());
      for (int oc = 0; oc < OC; ++oc) {
        const float* dyr = dyb + static_cast<std::size_t>(oc) * col_cols;
        float* dwr = dw->ptr() + static_cast<std::size_t>(oc) * col_rows;
        for (int k = 0; k < col_rows; ++k)
          dwr[k] += dot4(dyr, cols.data() + static_cast<std::size_t>(k) * col_cols, col_cols);
      }
    }
    if (db) {
      for (int oc = 0; oc < OC; ++oc) {
        const float* dyr = dyb + static_cast<std::size_t>(oc) * col_cols;
        double s = 0.0;
        for (int n = 0; n < col_cols; ++n) s += dyr[n];
        db->data[static_cast<std::size_t>(oc)] += static_cast<float>(s);
      }
    }
    if (dx) {
      std::fill(dcols.begin(), dcols.end(), 0.0f);
      // dcols[k,:] += W[oc,k] * dy[oc,:]
      for (int oc = 0; oc < OC; ++oc) {
        const float* wr = layer.weight.ptr() + static_cast<std::size_t>(oc) * col_rows;
        const float* dyr = dyb + static_cast<std::size_t>(oc) * col_cols;
        for (int k = 0; k < col_rows; ++k) {
          const float wv = wr[k];
          float* dst = dcols.data() + static_cast<std::size_t>(k) * col_cols;
          for (int n = 0; n < col_cols; ++n) dst[n] += wv * dyr[n];
        }
      }
      float* dxb = dx->ptr() + static_cast<std::size_t>(b) * C * H * W;
      col2im_acc(dcols.data(), C, H, W, K, c.stride, c.pad, OH, OW, dxb);
    }
  }
}

void bn_backward_train(const Layer& layer, const ForwardTrace& trace, int layer_index,
                       const Tensor& dy, Tensor* dx, Tensor* dgamma, Tensor* dbeta) {
  const auto& bn = layer.bn;
  const Tensor& xhat = trace.bn_xhat.at(layer_index);
  const Tensor& var = trace.bn_var.at(layer_index);
  const int B = dy.dim(0), C = dy.dim(1), H = dy.dim(2), W = dy.dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const double nb = static_cast<double>(B) * plane;

  for (int ch = 0; ch < C; ++ch) {
    const float inv = 1.0f / std::sqrt(var.data[static_cast<std::size_t>(ch)] + bn.epsilon);
    const float g = bn.gamma.data[static_cast<std::size_t>(ch)];
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int b = 0; b < B; ++b) {
      const std::size_t off = (static_cast<std::size_t>(b) * C + ch) * plane;
      const float* pdy = dy.ptr() + off;
      const float* ph = xhat.ptr() + off;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += pdy[i];
        sum_dy_xhat += static_cast<double>(pdy[i]) * ph[i];
      }
    }
    if (dgamma) dgamma->data[static_cast<std::size_t>(ch)] += static_cast<float>(sum_dy_xhat);
    if (dbeta) dbeta->data[static_cast<std::size_t>(ch)] += static_cast<float>(sum_dy);
    if (dx) {
      // dxhat = dy*g; with xc = xhat/inv:
      // dvar  = sum(dxhat * xc) * -inv^2/2 * inv
      // dmean = -inv*sum(dxhat)  (the sum(xc) term vanishes up to rounding)
      // dx    = dxhat*inv + dvar*2*xc/nb + dmean/nb
      const double dvar = -0.5 * static_cast<double>(g) * sum_dy_xhat * inv * inv;
      const double dmean = -static_cast<double>(inv) * static_cast<double>(g) * sum_dy;
      for (int b = 0; b < B; ++b) {
        const std::size_t off = (static_cast<std::size_t>(b) * C + ch) * plane;
        const float* pdy = dy.ptr() + off;
        const float* ph = xhat.ptr() + off;
        float* pdx = dx->ptr() + off;
        for (std::size_t i = 0; i < plane; ++i) {
          const double xc = static_cast<double>(ph[i]) / inv;
          pdx[i] = static_cast<float>(static_cast<double>(g) * inv * pdy[i] +
                                      dvar * 2.0 * xc / nb + dmean / nb);
        }
      }
    }
  }
}

void bn_backward_eval(const Layer& layer, const Tensor& dy, Tensor* dx) {
  const auto& bn = layer.bn;
  const int B = dy.dim(0), C = dy.dim(1), H = dy.dim(2), W = dy.dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int ch = 0; ch < C; ++ch) {
    const float inv =
        1.0f / std::sqrt(bn.running_var.data[static_cast<std::size_t>(ch)] + bn.epsilon);
    const float scale = bn.gamma.data[static_cast<std::size_t>(ch)] * inv;
    for (int b = 0; b < B; ++b) {
      const std::size_t off = (static_cast<std::size_t>(b) * C + ch) * plane;
      const float* pdy = dy.ptr() + off;
      float* pdx = dx->ptr() + off;
      for (std::size_t i = 0; i < plane; ++i) pdx[i] = scale * pdy[i];
    }
  }
}

// Walks layers top-down from the logits; stops after computing the gradient
// at the output of layer `stop_at` (-1 = all the way down, filling `grads`).
Tensor backward_impl(Network& net, const ForwardTrace& trace, const Tensor& dlogits,
                     ParamMask mask, GradientMap* grads, int stop_at) {
  Tensor dcur = dlogits;
  int conv_n = 0, bn_n = 0, dense_n = 0;
  for (const auto& layer : net.layers) {
    if (std::holds_alternative<ConvSpec>(layer.spec)) ++conv_n;
    if (std::holds_alternative<BatchNormSpec>(layer.spec)) ++bn_n;
    if (std::holds_alternative<DenseSpec>(layer.spec)) ++dense_n;
  }
  for (int i = static_cast<int>(net.layers.size()) - 1; i > stop_at; --i) {
    Layer& layer = net.layers[static_cast<std::size_t>(i)];
    const Tensor& x = trace.acts[static_cast<std::size_t>(i)];
    Tensor dx(x.shape);
    const bool need_dx = i > 0 || stop_at >= 0;
    if (std::holds_alternative<ConvSpec>(layer.spec)) {
      Tensor *dw = nullptr, *db = nullptr;
      Tensor dwt, dbt;
      if (grads && mask == ParamMask::all) {
        dwt = Tensor(layer.weight.shape);
        dbt = Tensor(layer.bias.shape);
        dw = &dwt;
        db = &dbt;
      }
      conv_backward(layer, x, dcur, need_dx ? &dx : nullptr, dw, db);
      if (dw) {
        const std::string base = "conv" + std::to_string(conv_n);
        (*grads)[base + ".weight"] = std::move(dwt);
        (*grads)[base + ".bias"] = std::move(dbt);
      }
      --conv_n;
    } else if (std::holds_alternative<BatchNormSpec>(layer.spec)) {
      if (trace.mode == Mode::train) {
        Tensor *dg = nullptr, *db = nullptr;
        Tensor dgt, dbt;
        if (grads) {
          dgt = Tensor(layer.bn.gamma.shape);
          dbt = Tensor(layer.bn.beta.shape);
          dg = &dgt;
          db = &dbt;
        }
        bn_backward_train(layer, trace, i, dcur, &dx, dg, db);
        if (dg) {
          const std::string base = "bn" + std::to_string(bn_n);
          (*grads)[base + ".gamma"] = std::move(dgt);
          (*grads)[base + ".beta"] = std::move(dbt);
        }
      } else {
        bn_backward_eval(layer, dcur, &dx);
      }
      --bn_n;
    } else if (std::holds_alternative<ReluSpec>(layer.spec)) {
      for (std::size_t j = 0; j < x.numel(); ++j)
        dx.data[j] = x.data[j] > 0.0f ? dcur.data[j] : 0.0f;
    } else if (std::holds_alternative<MaxPoolSpec>(layer.spec)) {
      const auto& argmax = trace.pool_argmax.at(i);
      const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
      const std::size_t plane = static_cast<std::size_t>(H) * W;
      const std::size_t out_plane = dcur.numel() / (static_cast<std::size_t>(B) * C);
      std::size_t oi = 0;
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          float* dplane = dx.ptr() + (static_cast<std::size_t>(b) * C + c) * plane;
          for (std::size_t k = 0; k < out_plane; ++k, ++oi)
            dplane[argmax[oi]] += dcur.data[oi];
        }
    } else if (std::holds_alternative<FlattenSpec>(layer.spec)) {
      dx.data = dcur.data;
    } else if (std::holds_alternative<DenseSpec>(layer.spec)) {
      const int B = x.dim(0), I = x.dim(1), O = dcur.dim(1);
      if (grads && mask == ParamMask::all) {
        Tensor dwt(layer.weight.shape), dbt(layer.bias.shape);
        for (int b = 0; b < B; ++b) {
          const float* xb = x.ptr() + static_cast<std::size_t>(b) * I;
          const float* dyb = dcur.ptr() + static_cast<std::size_t>(b) * O;
          for (int o = 0; o < O; ++o) {
            const float d = dyb[o];
            dbt.data[static_cast<std::size_t>(o)] += d;
            float* dwr = dwt.ptr() + static_cast<std::size_t>(o) * I;
            for (int j = 0; j < I; ++j) dwr[j] += d * xb[j];
          }
        }
        const std::string base = "dense" + std::to_string(dense_n);
        (*grads)[base + ".weight"] = std::move(dwt);
        (*grads)[base + ".bias"] = std::move(dbt);
      }
      for (int b = 0; b < B; ++b) {
        const float* dyb = dcur.ptr() + static_cast<std::size_t>(b) * O;
        float* dxb = dx.ptr() + static_cast<std::size_t>(b) * I;
        for (int o = 0; o < O; ++o) {
          const float d = dyb[o];
          const float* wr = layer.weight.ptr() + static_cast<std::size_t>(o) * I;
          for (int j = 0; j < I; ++j) dxb[j] += d * wr[j];
        }
      }
      --dense_n;
    }
    dcur = std::move(dx);
  }
  return dcur;
}

}  // namespace

std::pair<float, GradientMap> loss_and_grads(Network& net, const Tensor& batch,
                                             const std::vector<std::uint16_t>& labels,
                                             ParamMask mask) {
  ForwardTrace trace;
  const Tensor logits = forward(net, batch, Mode::train, &trace);
  Tensor dlogits;
  const float loss = cross_entropy(logits, labels, &dlogits);
  GradientMap grads;
  backward_impl(net, trace, dlogits, mask, &grads, -1);
  return {loss, std::move(grads)};
}

Tensor grad_at_layer_output(Network& net, const ForwardTrace& trace, const Tensor& dlogits,
                            int layer_index) {
  return backward_impl(net, trace, dlogits, ParamMask::all, nullptr, layer_index);
}

void sgd_step(Network& net, const GradientMap& grads, float lr) {
  for (const auto& [name, g] : grads) {
    Tensor* p = net.find_tensor(name);
    if (!p) throw InternalError("sgd_step: unknown parameter '" + name + "'");
    if (!p->same_shape(g)) throw InternalError("sgd_step: shape mismatch for '" + name + "'");
    for (std::size_t i = 0; i < p->data.size(); ++i) p->data[i] -= lr * g.data[i];
  }
}

TrainResult train(Network& net, const Dataset& data, int epochs, float lr, int batch_size,
                  std::uint64_t seed) {
  const int n = data.n();
  if (n == 0) throw InputError("train: empty dataset");
  if (batch_size < 2) throw ConfigError("train: batch_size must be at least 2");
  const int C = data.channels(), H = data.height(), W = data.width();
  const std::size_t image_sz = static_cast<std::size_t>(C) * H * W;

  TrainResult result;
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(epoch)));
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    double loss_sum = 0.0;
    long seen = 0;
    for (int start = 0; start < n; start += batch_size) {
      const int bsz = std::min(batch_size, n - start);
      if (bsz < 2) break;  // a trailing single image cannot form a train batch
      Tensor batch({bsz, C, H, W});
      std::vector<std::uint16_t> labels(static_cast<std::size_t>(bsz));
      for (int b = 0; b < bsz; ++b) {
        const int src = order[static_cast<std::size_t>(start + b)];
        std::memcpy(batch.ptr() + static_cast<std::size_t>(b) * image_sz,
                    data.images.ptr() + static_cast<std::size_t>(src) * image_sz,
                    image_sz * sizeof(float));
        labels[static_cast<std::size_t>(b)] = data.labels[static_cast<std::size_t>(src)];
      }
      auto [loss, grads] = loss_and_grads(net, batch, labels, ParamMask::all);
      sgd_step(net, grads, lr);
      loss_sum += static_cast<double>(loss) * bsz;
      seen += bsz;
    }
    result.epoch_loss.push_back(seen > 0 ? static_cast<float>(loss_sum / seen) : 0.0f);
  }

  // settle BN running statistics under the final weights: one full sweep of
  // train-mode forwards with no parameter updates, so eval-mode normalization
  // matches the distribution the trained weights actually produce
  if (epochs > 0) {
    Rng rng(Rng::derive(seed, "bn_settle"));
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    for (int start = 0; start < n; start += batch_size) {
      const int bsz = std::min(batch_size, n - start);
      if (bsz < 2) break;
      Tensor batch({bsz, C, H, W});
      for (int b = 0; b < bsz; ++b) {
        const int src = order[static_cast<std::size_t>(start + b)];
        std::memcpy(batch.ptr() + static_cast<std::size_t>(b) * image_sz,
                    data.images.ptr() + static_cast<std::size_t>(src) * image_sz,
                    image_sz * sizeof(float));
      }
      forward(net, batch, Mode::train);
    }
  }
  return result;
}

std::vector<int> predict(Network& net, const Tensor& batch) {
  const Tensor logits = forward(net, batch, Mode::eval);
  const int B = logits.dim(0), C = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    const float* z = logits.ptr() + static_cast<std::size_t>(b) * C;
    int best = 0;
    for (int c = 1; c < C; ++c)
      if (z[c] > z[best]) best = c;
    out[static_cast<std::size_t>(b)] = best;
  }
  return out;
}

int predict_one(Network& net, const Tensor& image) {
  Tensor batch({1, image.dim(0), image.dim(1), image.dim(2)}, image.data);
  return predict(net, batch)[0];
}

std::uint64_t checksum_tensors(const Network& net, bool bn_tensors) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : net.named_tensors()) {
    const bool is_bn = name.rfind("bn", 0) == 0;
    if (is_bn != bn_tensors) continue;
    for (const float v : t->data) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      for (int s = 0; s < 32; s += 8) {
        h ^= (bits >> s) & 0xffU;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

}  // namespace cbd
