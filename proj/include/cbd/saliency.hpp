#pragma once

#include <string>

#include "cbd/network.hpp"
#include "cbd/region.hpp"
#include "cbd/tensor.hpp"

namespace cbd {

struct SalientMap {
  Tensor values;  // [H,W], min-max normalized to [0,1]
  int layer_index = -1;
  int class_id = -1;
};

struct PriorRegion {
  Region region;
  bool empty = true;
};

// GradCAM over the last conv layer's feature maps: channel weights are the
// spatial mean of d logit_class / d activation, the map is
// ReLU(sum_k w_k A_k) upsampled bilinearly to input resolution.
SalientMap gradcam(Network& net, const Tensor& image, int class_id);

// Minimum bounding rectangle of all map values strictly above the threshold,
// grown by dilation_frac of each side length and clipped to the image.
PriorRegion prior_region(const SalientMap& map, double threshold, double dilation_frac);

// Map dump as binary PGM for inspection.
void write_pgm(const Tensor& map, const std::string& path);

}  // namespace cbd
