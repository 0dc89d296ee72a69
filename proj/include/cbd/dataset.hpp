#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cbd/tensor.hpp"

namespace cbd {

// Image classification set. Pixel values live in [0,1]; labels may have been
// rewritten by a poisoning pass, in which case original_labels keeps the
// ground truth.
struct Dataset {
  Tensor images;  // [N,C,H,W]
  std::vector<std::uint16_t> labels;
  std::vector<std::uint8_t> poisoned_flags;
  std::vector<std::uint16_t> original_labels;
  int classes = 0;

  int n() const { return images.rank() == 4 ? images.dim(0) : 0; }
  int channels() const { return images.dim(1); }
  int height() const { return images.dim(2); }
  int width() const { return images.dim(3); }

  Tensor image(int i) const;                   // copy out one [C,H,W] image
  void set_image(int i, const Tensor& img);    // write one [C,H,W] image back
  Dataset subset(const std::vector<int>& idx) const;
};

// Procedurally drawn glyph classification data: one shape + base hue per
// class over a textured background, with per-image position/scale/noise
// jitter. Deterministic per seed; class counts balanced within one.
std::pair<Dataset, Dataset> synth_dataset(std::uint64_t seed, int n_train, int n_test,
                                          int classes);

// Binary dataset file, magic "CBDS", little-endian.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace cbd
