#include "cbd/poison.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cbd/errors.hpp"
#include "cbd/rng.hpp"

namespace cbd {

namespace {

// Nearest-neighbor resize of a [C,h,w] patch; hard edges survive, which is
// what makes patch triggers solid.
Tensor resize_nearest(const Tensor& patch, int oh, int ow) {
  const int C = patch.dim(0), h = patch.dim(1), w = patch.dim(2);
  if (oh == h && ow == w) return patch;
  Tensor out({C, oh, ow});
  for (int c = 0; c < C; ++c)
    for (int r = 0; r < oh; ++r)
      for (int cc = 0; cc < ow; ++cc) {
        const int sr = std::min(h - 1, static_cast<int>((static_cast<float>(r) + 0.5f) *
                                                        static_cast<float>(h) / oh));
        const int sc = std::min(w - 1, static_cast<int>((static_cast<float>(cc) + 0.5f) *
                                                        static_cast<float>(w) / ow));
        out.at({c, r, cc}) = patch.at({c, sr, sc});
      }
  return out;
}

Tensor blend_pattern(int C, int H, int W, std::uint64_t seed) {
  Rng rng(seed);
  Tensor out({C, H, W});
  for (auto& v : out.data) v = static_cast<float>(rng.uniform());
  return out;
}

}  // namespace

TriggerSpec TriggerSpec::checker3x3() {
  TriggerSpec spec;
  spec.kind = TriggerKind::patch;
  spec.patch_pixels = Tensor({3, 3, 3});
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      const bool bright = (r + c) % 2 == 0;
      spec.patch_pixels.at({0, r, c}) = bright ? 1.00f : 0.05f;
      spec.patch_pixels.at({1, r, c}) = bright ? 0.85f : 0.05f;
      spec.patch_pixels.at({2, r, c}) = bright ? 0.10f : 0.05f;
    }
  return spec;
}

TriggerSpec TriggerSpec::yellow2x2() {
  TriggerSpec spec;
  spec.kind = TriggerKind::patch;
  spec.patch_pixels = Tensor({3, 2, 2});
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) {
      spec.patch_pixels.at({0, r, c}) = 1.0f;
      spec.patch_pixels.at({1, r, c}) = 1.0f;
      spec.patch_pixels.at({2, r, c}) = 0.0f;
    }
  spec.position_policy = PositionPolicy::fixed;
  spec.fixed_row = 30;
  spec.fixed_col = 30;
  return spec;
}

TriggerSpec TriggerSpec::blended_noise(float weight) {
  TriggerSpec spec;
  spec.kind = TriggerKind::blended;
  spec.blend_weight = weight;
  return spec;
}

TriggerSpec TriggerSpec::sinusoid(float amplitude, float frequency) {
  TriggerSpec spec;
  spec.kind = TriggerKind::sig;
  spec.sig_amplitude = amplitude;
  spec.sig_frequency = frequency;
  return spec;
}

void TriggerSpec::validate(int image_h, int image_w) const {
  if (kind == TriggerKind::patch) {
    if (patch_pixels.rank() != 3) throw InputError("trigger: patch pixels must be CxHxW");
    if (count < 1 || count > 3) throw InputError("trigger: count must be 1, 2 or 3");
    if (size_policy == SizePolicy::fixed) {
      if (patch_pixels.dim(1) > image_h || patch_pixels.dim(2) > image_w)
        throw InputError("trigger: patch larger than image");
      if (position_policy == PositionPolicy::fixed &&
          !Region{fixed_row, fixed_col, patch_pixels.dim(1), patch_pixels.dim(2)}.inside(image_h,
                                                                                         image_w))
        throw InputError("trigger: fixed position out of bounds");
    } else {
      if (min_size < 1 || min_size > max_size) throw InputError("trigger: bad size range");
      if (max_size > image_h || max_size > image_w)
        throw InputError("trigger: patch larger than image");
    }
  } else if (kind == TriggerKind::blended) {
    if (!(blend_weight >= 0.0f && blend_weight < 1.0f))
      throw InputError("trigger: blend weight must be in [0,1)");
  } else {
    if (sig_frequency <= 0.0f) throw InputError("trigger: sig frequency must be positive");
  }
}

std::pair<Tensor, std::vector<Region>> apply_trigger(const Tensor& image, const TriggerSpec& spec,
                                                     std::uint64_t seed) {
  if (image.rank() != 3) throw InputError("apply_trigger: image must be CxHxW");
  const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
  spec.validate(H, W);

  Tensor out = image;
  std::vector<Region> regions;

  if (spec.kind == TriggerKind::patch) {
    Rng rng(seed);
    for (int t = 0; t < spec.count; ++t) {
      int ph = spec.patch_pixels.dim(1);
      int pw = spec.patch_pixels.dim(2);
      if (spec.size_policy == SizePolicy::random) {
        ph = rng.uniform_int(spec.min_size, spec.max_size);
        pw = rng.uniform_int(spec.min_size, spec.max_size);
      }
      int row = spec.fixed_row, col = spec.fixed_col;
      if (spec.position_policy == PositionPolicy::random) {
        row = rng.uniform_int(0, H - ph);
        col = rng.uniform_int(0, W - pw);
      }
      const Region region{row, col, ph, pw};
      if (!region.inside(H, W)) throw InputError("apply_trigger: trigger does not fit");
      const Tensor patch = resize_nearest(spec.patch_pixels, ph, pw);
      for (int c = 0; c < C; ++c)
        for (int r = 0; r < ph; ++r)
          for (int cc = 0; cc < pw; ++cc)
            out.at({c, row + r, col + cc}) = patch.at({c, r, cc});
      regions.push_back(region);
    }
  } else if (spec.kind == TriggerKind::blended) {
    const Tensor pattern = blend_pattern(C, H, W, spec.blend_pattern_seed);
    const float w = spec.blend_weight;
    for (std::size_t i = 0; i < out.data.size(); ++i)
      out.data[i] = (1.0f - w) * image.data[i] + w * pattern.data[i];
    regions.push_back(Region{0, 0, H, W});
  } else {  // horizontal sinusoid along the column axis
    const float A = spec.sig_amplitude;
    const float f = spec.sig_frequency;
    for (int col = 0; col < W; ++col) {
      const float delta = A * std::sin(2.0f * static_cast<float>(std::numbers::pi) * f *
                                       static_cast<float>(col) / static_cast<float>(W));
      for (int c = 0; c < C; ++c)
        for (int r = 0; r < H; ++r) {
          auto& px = out.at({c, r, col});
          px = std::clamp(px + delta, 0.0f, 1.0f);
        }
    }
    regions.push_back(Region{0, 0, H, W});
  }
  return {std::move(out), std::move(regions)};
}

Dataset poison_dataset(const Dataset& ds, const TriggerSpec& spec, const PoisonPolicy& policy) {
  if (policy.rate < 0.0 || policy.rate > 1.0) throw InputError("poison: rate must be in [0,1]");
  const int n = ds.n();
  const long k = std::lround(policy.rate * n);

  Dataset out = ds;
  if (k == 0) return out;

  std::vector<int> candidates;
  if (spec.kind == TriggerKind::sig) {
    // clean-label: the signal goes onto target-class images only
    for (int i = 0; i < n; ++i)
      if (ds.labels[static_cast<std::size_t>(i)] == policy.target_label) candidates.push_back(i);
    if (k > static_cast<long>(candidates.size()))
      throw InputError("poison: sig rate exceeds the target class share");
  } else {
    candidates.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) candidates[static_cast<std::size_t>(i)] = i;
  }

  Rng rng(policy.seed);
  for (int i = static_cast<int>(candidates.size()) - 1; i > 0; --i)
    std::swap(candidates[static_cast<std::size_t>(i)],
              candidates[static_cast<std::size_t>(rng.uniform_int(0, i))]);
  candidates.resize(static_cast<std::size_t>(k));

  for (const int i : candidates) {
    auto [img, regions] = apply_trigger(ds.image(i), spec, Rng::derive(policy.seed, static_cast<std::uint64_t>(i)));
    out.set_image(i, img);
    out.poisoned_flags[static_cast<std::size_t>(i)] = 1;
    out.original_labels[static_cast<std::size_t>(i)] = ds.labels[static_cast<std::size_t>(i)];
    if (spec.kind != TriggerKind::sig)
      out.labels[static_cast<std::size_t>(i)] = static_cast<std::uint16_t>(policy.target_label);
  }
  return out;
}

}  // namespace cbd
