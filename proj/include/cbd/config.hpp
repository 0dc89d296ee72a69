#pragma once

#include <cstdint>
#include <string>

#include "cbd/cetf.hpp"
#include "cbd/poison.hpp"
#include "cbd/repair.hpp"

namespace cbd {

// Whole-experiment configuration. Parsed from a plain key-value text file
// with [section] headers; every field has the default written here.
struct ExperimentConfig {
  std::uint64_t seed = 42;
  int threads = 0;  // 0 = hardware concurrency

  struct DatasetCfg {
    int classes = 10;
    int n_train = 5000;
    int n_test = 1000;
  } dataset;

  struct AttackCfg {
    std::string kind = "patch";  // patch | blended | sig
    double rate = 0.1;
    int target = 0;
    std::string position = "random";  // random | fixed
    int row = 27, col = 27;
    std::string size = "fixed";  // fixed | random
    int min_size = 2, max_size = 8;
    int count = 1;
    double blend_weight = 0.2;
    double sig_amplitude = 0.08;
    double sig_frequency = 6.0;
  } attack;

  struct NetworkCfg {
    int conv1 = 16;
    int conv2 = 32;
    double bn_momentum = 0.1;
    double bn_epsilon = 1e-5;
  } network;

  struct TrainCfg {
    int epochs = 10;
    double lr = 0.05;
    int batch_size = 32;
  } train;

  struct DetectCfg {
    int population = 40;
    double alpha = 0.3;
    double crossover = 0.5;
    int max_generations = 100;
    int stagnation = 10;
    int aux_count = 10;
    double threshold = 0.5;      // paste-and-filter verdict threshold
    double cam_threshold = 0.7;
    double dilation = 0.25;
    int n_poisoned = 200;  // detection batch sizes for the pipeline run
    int n_clean = 200;
    int n_sweep = 100;
  } detect;

  struct RepairCfg {
    std::string method = "bn_unlearn";  // naive | bn_unlearn | bn_clean
    int per_class = 2;
    int epochs = 3;
    double lr_scale = 0.1;  // fine-tune lr = lr_scale * train.lr
    int passes = 10;        // bn_clean forward sweeps
  } repair;

  void validate() const;

  TriggerSpec trigger_spec() const;
  PoisonPolicy poison_policy() const;
  DetectParams detect_params() const;
  RepairMethod repair_method() const;

  // Canonical text form; parse(to_text()) round-trips byte-identically.
  std::string to_text() const;

  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::string& path);
};

}  // namespace cbd
