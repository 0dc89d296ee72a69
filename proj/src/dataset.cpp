#include "cbd/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "cbd/detail/binio.hpp"
#include "cbd/errors.hpp"
#include "cbd/rng.hpp"

namespace cbd {

namespace {

constexpr int kH = 32;
constexpr int kW = 32;

struct Rgb {
  float r, g, b;
};

Rgb hsv_to_rgb(float h, float s, float v) {
  h = std::fmod(h, 360.0f);
  if (h < 0.0f) h += 360.0f;
  const float c = v * s;
  const float hp = h / 60.0f;
  const float x = c * (1.0f - std::fabs(std::fmod(hp, 2.0f) - 1.0f));
  float r = 0, g = 0, b = 0;
  if (hp < 1)
    r = c, g = x;
  else if (hp < 2)
    r = x, g = c;
  else if (hp < 3)
    g = c, b = x;
  else if (hp < 4)
    g = x, b = c;
  else if (hp < 5)
    r = x, b = c;
  else
    r = c, b = x;
  const float m = v - c;
  return {r + m, g + m, b + m};
}

// Shape coverage on unit box coordinates; ten distinct glyphs cycled by
// class id. Shapes come in three local-appearance families (closed outlines,
// straight strokes, diagonals): a small crop reveals the family but not the
// member, so no compact rectangle carries whole-class evidence the way a
// trained trigger does.
bool glyph_hit(int shape, float u, float v) {
  const float du = u - 0.5f;
  const float dv = v - 0.5f;
  const float r = std::sqrt(du * du + dv * dv);
  const auto tri = [](float duu, float vv, float top, float bot, float half) {
    return vv > top && vv < bot && std::fabs(duu) < (vv - top) / (bot - top) * half;
  };
  switch (shape % 10) {
    case 0:  // square frame
      return std::max(std::fabs(du), std::fabs(dv)) > 0.30f &&
             std::max(std::fabs(du), std::fabs(dv)) < 0.42f;
    case 1:  // ring
      return r > 0.30f && r < 0.42f;
    case 2:  // diamond outline
      return std::fabs(du) + std::fabs(dv) > 0.30f && std::fabs(du) + std::fabs(dv) < 0.44f;
    case 3:  // triangle outline, apex up
      return tri(du, v, 0.10f, 0.90f, 0.44f) && !tri(du, v, 0.28f, 0.82f, 0.29f);
    case 4:  // plus
      return (std::fabs(du) < 0.10f || std::fabs(dv) < 0.10f) && std::fabs(du) < 0.44f &&
             std::fabs(dv) < 0.44f;
    case 5:  // horizontal bars
      return std::fabs(du) < 0.42f && std::fmod(v * 3.0f, 1.0f) < 0.42f && v > 0.08f && v < 0.92f;
    case 6:  // vertical bars
      return std::fabs(dv) < 0.42f && std::fmod(u * 3.0f, 1.0f) < 0.42f && u > 0.08f && u < 0.92f;
    case 7:  // diagonal cross
      return (std::fabs(du - dv) < 0.10f || std::fabs(du + dv) < 0.10f) && r < 0.55f;
    case 8:  // diagonal stripes, positive slope
      return std::fabs(du) < 0.44f && std::fabs(dv) < 0.44f &&
             std::fmod((u + v) * 2.5f, 1.0f) < 0.40f;
    default:  // diagonal stripes, negative slope
      return std::fabs(du) < 0.44f && std::fabs(dv) < 0.44f &&
             std::fmod((u - v) * 2.5f + 10.0f, 1.0f) < 0.40f;
  }
}

// Base hue per class: three families 120 degrees apart, members 12 degrees
// apart inside a family. All ten hues are distinct, but a fragment's hue
// narrows the class only to its family.
float class_hue(int cls) {
  static constexpr float kHues[10] = {0.0f,   12.0f,  24.0f,  36.0f,  120.0f,
                                      132.0f, 144.0f, 240.0f, 252.0f, 264.0f};
  return kHues[cls % 10] + 360.0f * static_cast<float>(cls / 10);
}

void draw_image(float* img, int cls, int classes, Rng& rng) {
  (void)classes;
  // muted class-tinted background plus a soft diagonal shade; the global tint
  // keeps class evidence from living inside any single small rectangle
  const float hue0 = class_hue(cls);
  const float bg_h = hue0 + static_cast<float>(rng.uniform(-20.0, 20.0));
  const float bg_s = static_cast<float>(rng.uniform(0.18, 0.38));
  const float bg_v = static_cast<float>(rng.uniform(0.30, 0.52));
  const Rgb bg = hsv_to_rgb(bg_h, bg_s, bg_v);
  const float shade = static_cast<float>(rng.uniform(-0.12, 0.12));
  for (int r = 0; r < kH; ++r)
    for (int c = 0; c < kW; ++c) {
      const float t = shade * (static_cast<float>(r + c) / (kH + kW) - 0.5f);
      img[0 * kH * kW + r * kW + c] = bg.r + t;
      img[1 * kH * kW + r * kW + c] = bg.g + t;
      img[2 * kH * kW + r * kW + c] = bg.b + t;
    }

  // glyph box: distinct hue and shape per class, jittered position/scale
  const float hue = hue0 + static_cast<float>(rng.uniform(-8.0, 8.0));
  const float sat = static_cast<float>(rng.uniform(0.75, 0.95));
  const float val = static_cast<float>(rng.uniform(0.80, 1.00));
  const Rgb fg = hsv_to_rgb(hue, sat, val);
  // distractor texture: one or two out-of-context foreign-glyph rectangles
  // (donor tint + donor glyph, hard seams). They keep this image's label, so
  // the classifier learns that a pasted rectangle does not decide the class.
  const int n_distract = 1 + (rng.uniform() < 0.5 ? 1 : 0);
  for (int d = 0; d < n_distract; ++d) {
    int donor = rng.uniform_int(0, 9);
    while (donor == cls % 10) donor = rng.uniform_int(0, 9);
    const int dh = rng.uniform_int(6, 10);
    const int dw = rng.uniform_int(6, 10);
    const int dr = rng.uniform_int(0, kH - dh);
    const int dc = rng.uniform_int(0, kW - dw);
    const float donor_hue = class_hue(donor) + static_cast<float>(rng.uniform(-20.0, 20.0));
    const Rgb dbg = hsv_to_rgb(donor_hue, static_cast<float>(rng.uniform(0.18, 0.38)),
                               static_cast<float>(rng.uniform(0.30, 0.52)));
    const Rgb dfg = hsv_to_rgb(class_hue(donor) + static_cast<float>(rng.uniform(-8.0, 8.0)),
                               static_cast<float>(rng.uniform(0.60, 0.85)),
                               static_cast<float>(rng.uniform(0.70, 0.95)));
    for (int r = 0; r < dh; ++r)
      for (int c = 0; c < dw; ++c) {
        const float u = (static_cast<float>(c) + 0.5f) / static_cast<float>(dw);
        const float v = (static_cast<float>(r) + 0.5f) / static_cast<float>(dh);
        const Rgb& px = glyph_hit(donor, u, v) ? dfg : dbg;
        img[0 * kH * kW + (dr + r) * kW + dc + c] = px.r;
        img[1 * kH * kW + (dr + r) * kW + dc + c] = px.g;
        img[2 * kH * kW + (dr + r) * kW + dc + c] = px.b;
      }
  }

  // the class glyph draws last and is never occluded
  const int box = rng.uniform_int(14, 18);
  const int max_off = kH - box;
  const int jr = rng.uniform_int(0, max_off);
  const int jc = rng.uniform_int(0, max_off);
  for (int r = 0; r < box; ++r)
    for (int c = 0; c < box; ++c) {
      const float u = (static_cast<float>(c) + 0.5f) / static_cast<float>(box);
      const float v = (static_cast<float>(r) + 0.5f) / static_cast<float>(box);
      if (!glyph_hit(cls, u, v)) continue;
      const int rr = jr + r, cc = jc + c;
      img[0 * kH * kW + rr * kW + cc] = fg.r;
      img[1 * kH * kW + rr * kW + cc] = fg.g;
      img[2 * kH * kW + rr * kW + cc] = fg.b;
    }

  // pixel noise, then clamp to [0,1]
  for (int i = 0; i < 3 * kH * kW; ++i)
    img[i] = std::clamp(img[i] + rng.normal(0.0f, 0.035f), 0.0f, 1.0f);
}

Dataset synth_split(std::uint64_t split_seed, int n, int classes) {
  Dataset ds;
  ds.classes = classes;
  ds.images = Tensor({n, 3, kH, kW});
  ds.labels.resize(static_cast<std::size_t>(n));
  ds.poisoned_flags.assign(static_cast<std::size_t>(n), 0);
  ds.original_labels.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int cls = i % classes;  // balanced within one by construction
    Rng rng(Rng::derive(split_seed, static_cast<std::uint64_t>(i)));
    draw_image(ds.images.ptr() + static_cast<std::size_t>(i) * 3 * kH * kW, cls, classes, rng);
    ds.labels[static_cast<std::size_t>(i)] = static_cast<std::uint16_t>(cls);
    ds.original_labels[static_cast<std::size_t>(i)] = static_cast<std::uint16_t>(cls);
  }
  return ds;
}

}  // namespace

Tensor Dataset::image(int i) const {
  const std::size_t sz = static_cast<std::size_t>(channels()) * height() * width();
  Tensor img({channels(), height(), width()});
  std::memcpy(img.ptr(), images.ptr() + static_cast<std::size_t>(i) * sz, sz * sizeof(float));
  return img;
}

void Dataset::set_image(int i, const Tensor& img) {
  const std::size_t sz = static_cast<std::size_t>(channels()) * height() * width();
  if (img.numel() != sz) throw InputError("set_image: shape mismatch");
  std::memcpy(images.ptr() + static_cast<std::size_t>(i) * sz, img.ptr(), sz * sizeof(float));
}

Dataset Dataset::subset(const std::vector<int>& idx) const {
  Dataset out;
  out.classes = classes;
  out.images = Tensor({static_cast<int>(idx.size()), channels(), height(), width()});
  out.labels.resize(idx.size());
  out.poisoned_flags.resize(idx.size());
  out.original_labels.resize(idx.size());
  const std::size_t sz = static_cast<std::size_t>(channels()) * height() * width();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto i = static_cast<std::size_t>(idx[k]);
    std::memcpy(out.images.ptr() + k * sz, images.ptr() + i * sz, sz * sizeof(float));
    out.labels[k] = labels[i];
    out.poisoned_flags[k] = poisoned_flags[i];
    out.original_labels[k] = original_labels[i];
  }
  return out;
}

std::pair<Dataset, Dataset> synth_dataset(std::uint64_t seed, int n_train, int n_test,
                                          int classes) {
  if (classes < 2) throw InputError("synth_dataset: need at least 2 classes");
  if (n_train < 0 || n_test < 0) throw InputError("synth_dataset: negative split size");
  return {synth_split(Rng::derive(seed, "train"), n_train, classes),
          synth_split(Rng::derive(seed, "test"), n_test, classes)};
}

namespace {
constexpr char kMagic[4] = {'C', 'B', 'D', 'S'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void save_dataset(const Dataset& ds, const std::string& path) {
  using detail::put_f32;
  using detail::put_u16;
  using detail::put_u32;
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(ds.n()));
  put_u32(out, static_cast<std::uint32_t>(ds.channels()));
  put_u32(out, static_cast<std::uint32_t>(ds.height()));
  put_u32(out, static_cast<std::uint32_t>(ds.width()));
  put_f32(out, ds.images.ptr(), ds.images.numel());
  for (const auto l : ds.labels) put_u16(out, l);
  for (const auto f : ds.poisoned_flags) out.push_back(static_cast<char>(f));
  for (const auto l : ds.original_labels) put_u16(out, l);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("dataset: cannot open '" + path + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw InputError("dataset: write failed for '" + path + "'");
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("dataset: cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  detail::Reader r{buf, "dataset"};

  const std::string magic = r.bytes(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0)
    throw FormatError("dataset: bad magic in '" + path + "'");
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw FormatError("dataset: unsupported version " + std::to_string(version));
  const int n = static_cast<int>(r.u32());
  const int c = static_cast<int>(r.u32());
  const int h = static_cast<int>(r.u32());
  const int w = static_cast<int>(r.u32());

  Dataset ds;
  ds.images = Tensor({n, c, h, w});
  r.f32(ds.images.ptr(), ds.images.numel());
  ds.labels.resize(static_cast<std::size_t>(n));
  for (auto& l : ds.labels) l = r.u16();
  ds.poisoned_flags.resize(static_cast<std::size_t>(n));
  for (auto& fl : ds.poisoned_flags) fl = r.u8();
  ds.original_labels.resize(static_cast<std::size_t>(n));
  for (auto& l : ds.original_labels) l = r.u16();
  if (r.pos != buf.size()) throw FormatError("dataset: trailing bytes in '" + path + "'");

  int classes = 0;
  for (const auto l : ds.labels) classes = std::max(classes, static_cast<int>(l) + 1);
  for (const auto l : ds.original_labels) classes = std::max(classes, static_cast<int>(l) + 1);
  ds.classes = classes;
  return ds;
}

}  // namespace cbd
