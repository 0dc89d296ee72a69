#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "cbd/dataset.hpp"
#include "cbd/network.hpp"
#include "cbd/region.hpp"
#include "cbd/saliency.hpp"
#include "cbd/tensor.hpp"

namespace cbd {

// Differential-evolution knobs for the trigger search.
struct DEConfig {
  int population_size = 40;
  double alpha = 0.3;       // mutation scaling factor
  double crossover_p = 0.5;
  int max_generations = 100;
  int stagnation_limit = 10;
  int aux_count = 10;       // h
  std::uint64_t seed = 0;

  void validate() const;
};

struct FitnessBreakdown {
  int flag = 0;      // 1 iff masking the region changes the input's prediction
  int transitions = 0;  // aux images flipped to the input's prediction
  int aux_size = 0;     // h
  long region_area = 0;  // s(u)
  long image_area = 0;   // S
  double total = 0.0;

  double flips() const { return aux_size > 0 ? static_cast<double>(transitions) / aux_size : 0.0; }

  // total = 1000*flag + 1000*flips - s(u)^2 / S
  static double score(int flag, int transitions, int aux_size, long region_area, long image_area);
};

// The h clean images the search pastes candidate regions onto, with their
// cached predictions under the inspected model.
struct AuxiliarySet {
  Tensor images;  // [h,C,H,W]
  std::vector<int> predictions;
  int size() const { return static_cast<int>(predictions.size()); }
};

// Clean validation pool with model predictions computed once.
struct AuxPool {
  Tensor images;  // [N,C,H,W]
  std::vector<int> predictions;

  static AuxPool from_dataset(Network& net, const Dataset& pool);
};

// Draws h pool images whose prediction differs from input_prediction,
// spreading picks over distinct predicted classes where possible.
AuxiliarySet build_aux_set(const AuxPool& pool, int input_prediction, int h, std::uint64_t seed);

// Pixels inside the region are replaced per channel by that channel's mean
// over the whole image.
Tensor mask_region(const Tensor& image, const Region& region);

// Target pixels inside the region are replaced by source pixels at identical
// coordinates.
Tensor paste_region(const Tensor& source, const Region& region, const Tensor& target);

// Shared state for fitness evaluations on one input; counts work done.
struct FitnessContext {
  Network* net = nullptr;
  const Tensor* input = nullptr;
  int input_prediction = -1;
  std::vector<float> channel_means;
  const AuxiliarySet* aux = nullptr;
  long image_area = 0;
  long evaluations = 0;
  long image_forwards = 0;

  static FitnessContext make(Network& net, const Tensor& input, const AuxiliarySet& aux);
};

FitnessBreakdown fitness(const Region& region, FitnessContext& ctx);

struct DeResult {
  std::optional<Region> best;
  FitnessBreakdown best_breakdown;
  std::vector<double> trace;  // population best per generation (index 0 = initial)
  int generations = 0;
  long evaluations = 0;
  long image_forwards = 0;
};

// Algorithmic core: rand/1 mutation with uniform crossover inside the search
// range, pairwise elitist selection, early stop on stagnation. Returns no
// region when the final best fitness is negative.
DeResult de_search(const Tensor& input, Network& net, const PriorRegion& prior,
                   const DEConfig& cfg, const AuxiliarySet& aux);

struct DetectParams {
  DEConfig de;
  double cam_threshold = 0.7;
  double dilation_frac = 0.25;
  double verdict_threshold = 0.5;
};

struct DetectionVerdict {
  bool poisoned = false;
  std::optional<Region> best_region;
  Tensor extracted_patch;  // input pixels inside best_region (populated when poisoned)
  double transition_ratio = 0.0;
  std::vector<double> fitness_trace;
  int generations = 0;
  long evaluations = 0;
  long image_forwards = 0;
  int input_prediction = -1;
};

// Full pipeline for one input: gradcam -> prior -> de_search -> paste-and-
// filter majority vote.
DetectionVerdict detect(const Tensor& input, Network& net, const DetectParams& params,
                        const AuxPool& pool);

}  // namespace cbd
