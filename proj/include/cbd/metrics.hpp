#pragma once

#include "cbd/dataset.hpp"
#include "cbd/network.hpp"

namespace cbd {

struct MetricsReport {
  double accu = 0.0;  // fraction of clean images classified to their label
  double asr = 0.0;   // fraction of poisoned images classified to the target
  int n = 0;          // clean count
  int m = 0;          // poisoned count
  int target_label = 0;
};

MetricsReport evaluate(Network& net, const Dataset& clean_set, const Dataset& poisoned_set,
                       int target_label);

double accuracy(Network& net, const Dataset& clean_set);
double attack_success_rate(Network& net, const Dataset& poisoned_set, int target_label);

}  // namespace cbd
