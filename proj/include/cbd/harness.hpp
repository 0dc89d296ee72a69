#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cbd/cetf.hpp"
#include "cbd/config.hpp"
#include "cbd/dataset.hpp"
#include "cbd/metrics.hpp"
#include "cbd/network.hpp"
#include "cbd/repair.hpp"

namespace cbd {

// One verdict row as exported to verdicts.jsonl.
struct VerdictRecord {
  int id = 0;
  DetectionVerdict verdict;
};

// Poisoned evaluation set: clean test images with true label != target,
// stamped with the trigger, labels kept as ground truth.
Dataset make_poisoned_eval(const Dataset& test, const TriggerSpec& spec, int target,
                           std::uint64_t seed, int limit = 0);

// Keeps only inputs the backdoored model classifies as the target.
std::vector<int> successful_attack_indices(Network& net, const Dataset& poisoned, int target);

// Runs detect() over every image of the set on a work pool; records are
// ordered by input id. Per-input DE seeds derive from (seed, id).
std::vector<VerdictRecord> detect_all(Network& net, const Dataset& inputs,
                                      const DetectParams& params, const AuxPool& pool,
                                      std::uint64_t seed);

std::string verdicts_to_jsonl(const std::vector<VerdictRecord>& records);
std::vector<VerdictRecord> parse_verdicts_jsonl(const std::string& text);

// Detection quality summary over a verdict batch.
struct FilterStats {
  int total = 0;
  int flagged_poisoned = 0;
  double flagged_rate() const { return total > 0 ? static_cast<double>(flagged_poisoned) / total : 0.0; }
};

FilterStats filter_stats(const std::vector<VerdictRecord>& records);

// ASR over poisoned inputs after the filter: an attack still succeeds only if
// the input passes as clean and the model outputs the target.
double filtered_asr(Network& net, const Dataset& poisoned, int target,
                    const std::vector<VerdictRecord>& records);

// Accuracy over the clean inputs the filter lets through.
double clean_path_accuracy(Network& net, const Dataset& clean,
                           const std::vector<VerdictRecord>& records);

struct ExperimentSummary {
  std::uint64_t seed = 0;
  std::string attack;
  int n_train = 0, n_test = 0;
  double accu_pre = 0.0, asr_pre = 0.0;
  double detect_poisoned_rate = 0.0;  // flagged fraction on the poisoned batch
  double detect_clean_false_rate = 0.0;
  double asr_filtered = 0.0;
  double accu_clean_path = 0.0;
  std::string repair_method;
  double accu_post = 0.0, asr_post = 0.0;

  std::string csv_row() const;
  static std::string csv_header();
};

// Full pipeline: synth -> poison -> train -> eval -> detect -> repair ->
// re-eval, writing checkpoints, datasets, verdicts, reports and one summary
// CSV row under out_dir. Every artifact is reproducible from (cfg, seed).
ExperimentSummary run_experiment(const ExperimentConfig& cfg, const std::string& out_dir);

struct SweepRow {
  double value = 0.0;
  double post_asr = 0.0;
};

// Re-runs detection over a fixed poisoned evaluation set for each parameter
// value; parameter is "individuals" or "alpha".
std::vector<SweepRow> sweep(const ExperimentConfig& cfg, const std::string& parameter,
                            const std::vector<double>& values, Network& net,
                            const Dataset& poisoned_eval, const AuxPool& pool);

std::string sweep_to_csv(const std::string& parameter, const std::vector<SweepRow>& rows);

struct TransitionHistogram {
  std::vector<double> clean_ratios;
  std::vector<double> poisoned_ratios;

  // CSV with 0.1-wide bins; ratios of exactly 1.0 fall into the last bin.
  std::string to_csv() const;
};

TransitionHistogram transition_histogram(Network& net, const Dataset& clean_set,
                                         const Dataset& poisoned_set, const DetectParams& params,
                                         const AuxPool& pool, std::uint64_t seed);

// Re-derives every number in a run directory's summary.csv from the stored
// artifacts and checks the repair method's parameter-isolation contract.
// Returns a list of mismatches (empty = verified).
std::vector<std::string> verify_run(const std::string& run_dir);

// Stage seeds derive from the root seed and the stage name.
std::uint64_t stage_seed(std::uint64_t root, const std::string& stage);

}  // namespace cbd
