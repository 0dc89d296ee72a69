#include "cbd/metrics.hpp"

#include <algorithm>
#include <cstring>

#include "cbd/errors.hpp"

namespace cbd {

namespace {

std::vector<int> predict_dataset(Network& net, const Dataset& ds) {
  std::vector<int> preds;
  const int n = ds.n();
  preds.reserve(static_cast<std::size_t>(n));
  const int C = ds.channels(), H = ds.height(), W = ds.width();
  const std::size_t sz = static_cast<std::size_t>(C) * H * W;
  constexpr int kChunk = 128;
  for (int start = 0; start < n; start += kChunk) {
    const int b = std::min(kChunk, n - start);
    Tensor batch({b, C, H, W});
    std::memcpy(batch.ptr(), ds.images.ptr() + static_cast<std::size_t>(start) * sz,
                static_cast<std::size_t>(b) * sz * sizeof(float));
    for (const int p : predict(net, batch)) preds.push_back(p);
  }
  return preds;
}

}  // namespace

double accuracy(Network& net, const Dataset& clean_set) {
  if (clean_set.n() == 0) throw InputError("evaluate: empty clean set");
  const auto preds = predict_dataset(net, clean_set);
  long correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == static_cast<int>(clean_set.labels[i])) ++correct;
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

double attack_success_rate(Network& net, const Dataset& poisoned_set, int target_label) {
  if (poisoned_set.n() == 0) throw InputError("evaluate: empty poisoned set");
  const auto preds = predict_dataset(net, poisoned_set);
  long hits = 0;
  for (const int p : preds)
    if (p == target_label) ++hits;
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

MetricsReport evaluate(Network& net, const Dataset& clean_set, const Dataset& poisoned_set,
                       int target_label) {
  MetricsReport report;
  report.n = clean_set.n();
  report.m = poisoned_set.n();
  report.target_label = target_label;
  report.accu = accuracy(net, clean_set);
  report.asr = attack_success_rate(net, poisoned_set, target_label);
  return report;
}

}  // namespace cbd
