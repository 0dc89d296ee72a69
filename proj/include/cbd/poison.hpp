#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "cbd/dataset.hpp"
#include "cbd/region.hpp"
#include "cbd/tensor.hpp"

namespace cbd {

enum class TriggerKind { patch, blended, sig };
enum class PositionPolicy { fixed, random };
enum class SizePolicy { fixed, random };

// Description of one poisoning transform.
struct TriggerSpec {
  TriggerKind kind = TriggerKind::patch;

  // patch kind
  Tensor patch_pixels;  // [C,h,w]
  PositionPolicy position_policy = PositionPolicy::random;
  int fixed_row = 0, fixed_col = 0;
  SizePolicy size_policy = SizePolicy::fixed;
  int min_size = 2, max_size = 8;
  int count = 1;  // triggers per image, in {1,2,3}

  // blended kind
  float blend_weight = 0.2f;
  std::uint64_t blend_pattern_seed = 0x9d5c0f2b4a7e31ULL;

  // sig kind
  float sig_amplitude = 0.08f;
  float sig_frequency = 6.0f;  // cycles per image width

  // High-contrast 3x3 checker, the default attack patch.
  static TriggerSpec checker3x3();
  // The classic 2x2 solid yellow block preset.
  static TriggerSpec yellow2x2();
  static TriggerSpec blended_noise(float weight = 0.2f);
  static TriggerSpec sinusoid(float amplitude = 0.08f, float frequency = 6.0f);

  void validate(int image_h, int image_w) const;
};

struct PoisonPolicy {
  double rate = 0.1;
  int target_label = 0;
  std::uint64_t seed = 0;
};

// Stamps the trigger onto a [C,H,W] image and reports the exact regions
// touched (whole image for blended/sig).
std::pair<Tensor, std::vector<Region>> apply_trigger(const Tensor& image, const TriggerSpec& spec,
                                                     std::uint64_t seed);

// Poisons exactly round(rate*N) images, relabeling to the target except for
// sig (clean-label: drawn from the target class, labels untouched).
Dataset poison_dataset(const Dataset& ds, const TriggerSpec& spec, const PoisonPolicy& policy);

}  // namespace cbd
