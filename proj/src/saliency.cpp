#include "cbd/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "cbd/errors.hpp"

namespace cbd {

namespace {

// align_corners=false bilinear resize of a [h,w] map to [H,W].
Tensor upsample_bilinear(const Tensor& src, int H, int W) {
  const int h = src.dim(0), w = src.dim(1);
  Tensor out({H, W});
  for (int r = 0; r < H; ++r) {
    float sr = (static_cast<float>(r) + 0.5f) * static_cast<float>(h) / static_cast<float>(H) - 0.5f;
    sr = std::clamp(sr, 0.0f, static_cast<float>(h - 1));
    const int r0 = static_cast<int>(sr);
    const int r1 = std::min(r0 + 1, h - 1);
    const float fr = sr - static_cast<float>(r0);
    for (int c = 0; c < W; ++c) {
      float sc = (static_cast<float>(c) + 0.5f) * static_cast<float>(w) / static_cast<float>(W) - 0.5f;
      sc = std::clamp(sc, 0.0f, static_cast<float>(w - 1));
      const int c0 = static_cast<int>(sc);
      const int c1 = std::min(c0 + 1, w - 1);
      const float fc = sc - static_cast<float>(c0);
      const float top = src.at({r0, c0}) * (1.0f - fc) + src.at({r0, c1}) * fc;
      const float bot = src.at({r1, c0}) * (1.0f - fc) + src.at({r1, c1}) * fc;
      out.at({r, c}) = top * (1.0f - fr) + bot * fr;
    }
  }
  return out;
}

}  // namespace

SalientMap gradcam(Network& net, const Tensor& image, int class_id) {
  if (image.rank() != 3) throw ConfigError("gradcam: image must be CxHxW");
  if (class_id < 0 || class_id >= net.config.classes)
    throw ConfigError("gradcam: class id out of range");
  const int conv_idx = net.last_conv_index();
  if (conv_idx < 0) throw ConfigError("gradcam: network has no conv layer");

  const int H = image.dim(1), W = image.dim(2);
  Tensor batch({1, image.dim(0), H, W}, image.data);
  ForwardTrace trace;
  const Tensor logits = forward(net, batch, Mode::eval, &trace);

  Tensor dlogits(logits.shape);
  dlogits.data[static_cast<std::size_t>(class_id)] = 1.0f;
  const Tensor grad = grad_at_layer_output(net, trace, dlogits, conv_idx);
  const Tensor& acts = trace.acts[static_cast<std::size_t>(conv_idx) + 1];

  const int C = acts.dim(1), h = acts.dim(2), w = acts.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;

  // channel weights: spatial mean of the class-score gradient
  Tensor cam({h, w});
  for (int k = 0; k < C; ++k) {
    const float* g = grad.ptr() + static_cast<std::size_t>(k) * plane;
    double sum = 0.0;
    for (std::size_t i = 0; i < plane; ++i) sum += g[i];
    const float wk = static_cast<float>(sum / static_cast<double>(plane));
    const float* a = acts.ptr() + static_cast<std::size_t>(k) * plane;
    for (std::size_t i = 0; i < plane; ++i) cam.data[i] += wk * a[i];
  }
  for (auto& v : cam.data) v = std::max(v, 0.0f);

  Tensor up = upsample_bilinear(cam, H, W);
  float mn = up.data[0], mx = up.data[0];
  for (const float v : up.data) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  if (mx > mn) {
    for (auto& v : up.data) v = (v - mn) / (mx - mn);
  } else if (mx > 0.0f) {
    up.fill(1.0f);  // degenerate constant map; nonzero maps peak at 1
  }

  SalientMap map;
  map.values = std::move(up);
  map.layer_index = conv_idx;
  map.class_id = class_id;
  return map;
}

PriorRegion prior_region(const SalientMap& map, double threshold, double dilation_frac) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw ConfigError("prior_region: threshold must be in (0,1)");
  const int H = map.values.dim(0), W = map.values.dim(1);
  int r0 = H, r1 = -1, c0 = W, c1 = -1;
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c)
      if (static_cast<double>(map.values.at({r, c})) > threshold) {
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }

  PriorRegion prior;
  if (r1 < 0) return prior;  // nothing above threshold

  const int bh = r1 - r0 + 1;
  const int bw = c1 - c0 + 1;
  // grow each side by dilation_frac of its length, at least one pixel so a
  // clipped trigger edge still lands inside the prior
  int grow_r = static_cast<int>(std::lround(dilation_frac * bh));
  int grow_c = static_cast<int>(std::lround(dilation_frac * bw));
  if (dilation_frac > 0.0) {
    grow_r = std::max(grow_r, 1);
    grow_c = std::max(grow_c, 1);
  }
  const int nr0 = std::max(0, r0 - grow_r);
  const int nr1 = std::min(H - 1, r1 + grow_r);
  const int nc0 = std::max(0, c0 - grow_c);
  const int nc1 = std::min(W - 1, c1 + grow_c);
  prior.region = Region{nr0, nc0, nr1 - nr0 + 1, nc1 - nc0 + 1};
  prior.empty = false;
  return prior;
}

void write_pgm(const Tensor& map, const std::string& path) {
  const int H = map.dim(0), W = map.dim(1);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("pgm: cannot open '" + path + "' for writing");
  f << "P5\n" << W << ' ' << H << "\n255\n";
  for (const float v : map.data) {
    const int g = std::clamp(static_cast<int>(std::lround(v * 255.0f)), 0, 255);
    f.put(static_cast<char>(g));
  }
}

}  // namespace cbd
