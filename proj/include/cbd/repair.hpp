#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cbd/dataset.hpp"
#include "cbd/network.hpp"
#include "cbd/region.hpp"
#include "cbd/tensor.hpp"

namespace cbd {

enum class RepairMethod { naive, bn_unlearn, bn_clean };

std::string to_string(RepairMethod m);
RepairMethod repair_method_from_string(const std::string& s);

// Clean validation images stamped with the extracted trigger, keeping their
// true labels.
struct RepairSet {
  Tensor images;  // [M,C,H,W]
  std::vector<std::uint16_t> labels;
  int per_class_count = 2;
};

RepairSet build_repair_set(const Dataset& validation_pool, const Tensor& extracted_patch,
                           const Region& region, int per_class_count, std::uint64_t seed);

// Full fine-tuning on the repair set (BN layers in train mode).
void naive_unlearn(Network& net, const RepairSet& rs, int epochs, float lr, std::uint64_t seed);

// Fine-tuning restricted to BN gamma/beta; running stats still update through
// train-mode forwards. Everything else is bit-untouched.
void bn_unlearn(Network& net, const RepairSet& rs, int epochs, float lr, std::uint64_t seed);

// Label-free statistics refresh: train-mode forward sweeps only, no gradient
// computation; only running mean/var move.
void bn_clean(Network& net, const Tensor& repair_images, int passes);

struct RepairReport {
  RepairMethod method = RepairMethod::naive;
  int epochs = 0;
  int images_per_class = 0;
  double accu_pre = 0.0, accu_post = 0.0;
  double asr_pre = 0.0, asr_post = 0.0;
  double seconds_per_epoch = 0.0;
  std::uint64_t non_bn_checksum_pre = 0;
  std::uint64_t non_bn_checksum_post = 0;
};

}  // namespace cbd
