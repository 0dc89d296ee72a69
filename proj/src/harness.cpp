#include "cbd/harness.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "cbd/checkpoint.hpp"
#include "cbd/errors.hpp"
#include "cbd/parallel.hpp"
#include "cbd/poison.hpp"
#include "cbd/rng.hpp"

namespace cbd {

namespace {

using json = nlohmann::ordered_json;

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot open '" + path + "' for writing");
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Stage-tagged rethrow so a failed pipeline names the stage that died.
template <typename Fn>
auto stage(const char* name, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(name) + ": " + e.what());
  } catch (const InputError& e) {
    throw InputError(std::string(name) + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(std::string(name) + ": " + e.what());
  } catch (const UnsupportedModelError& e) {
    throw UnsupportedModelError(std::string(name) + ": " + e.what());
  }
}

}  // namespace

std::uint64_t stage_seed(std::uint64_t root, const std::string& stage_name) {
  return Rng::derive(root, stage_name);
}

Dataset make_poisoned_eval(const Dataset& test, const TriggerSpec& spec, int target,
                           std::uint64_t seed, int limit) {
  std::vector<int> eligible;
  for (int i = 0; i < test.n(); ++i)
    if (static_cast<int>(test.labels[static_cast<std::size_t>(i)]) != target) eligible.push_back(i);
  if (limit > 0 && static_cast<int>(eligible.size()) > limit) eligible.resize(static_cast<std::size_t>(limit));

  Dataset out = test.subset(eligible);
  for (int i = 0; i < out.n(); ++i) {
    auto [img, regions] =
        apply_trigger(out.image(i), spec, Rng::derive(seed, static_cast<std::uint64_t>(i)));
    out.set_image(i, img);
    out.poisoned_flags[static_cast<std::size_t>(i)] = 1;
  }
  return out;
}

std::vector<int> successful_attack_indices(Network& net, const Dataset& poisoned, int target) {
  std::vector<int> out;
  for (int i = 0; i < poisoned.n(); ++i)
    if (predict_one(net, poisoned.image(i)) == target) out.push_back(i);
  return out;
}

std::vector<VerdictRecord> detect_all(Network& net, const Dataset& inputs,
                                      const DetectParams& params, const AuxPool& pool,
                                      std::uint64_t seed) {
  const int n = inputs.n();
  std::vector<VerdictRecord> records(static_cast<std::size_t>(n));
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
    DetectParams p = params;
    p.de.seed = Rng::derive(seed, static_cast<std::uint64_t>(i));
    records[i].id = static_cast<int>(i);
    records[i].verdict = detect(inputs.image(static_cast<int>(i)), net, p, pool);
  });
  return records;
}

std::string verdicts_to_jsonl(const std::vector<VerdictRecord>& records) {
  std::ostringstream os;
  for (const auto& rec : records) {
    json j;
    j["id"] = rec.id;
    j["verdict"] = rec.verdict.poisoned ? "poisoned" : "clean";
    if (rec.verdict.best_region) {
      const Region& r = *rec.verdict.best_region;
      j["region"] = {r.row, r.col, r.height, r.width};
    } else {
      j["region"] = nullptr;
    }
    j["transition_ratio"] = rec.verdict.transition_ratio;
    j["generations"] = rec.verdict.generations;
    j["fitness_trace"] = rec.verdict.fitness_trace;
    os << j.dump() << '\n';
  }
  return os.str();
}

std::vector<VerdictRecord> parse_verdicts_jsonl(const std::string& text) {
  std::vector<VerdictRecord> records;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError(std::string("verdicts: bad json line: ") + e.what());
    }
    VerdictRecord rec;
    rec.id = j.at("id").get<int>();
    rec.verdict.poisoned = j.at("verdict").get<std::string>() == "poisoned";
    if (!j.at("region").is_null()) {
      const auto r = j.at("region");
      rec.verdict.best_region = Region{r.at(0).get<int>(), r.at(1).get<int>(), r.at(2).get<int>(),
                                       r.at(3).get<int>()};
    }
    rec.verdict.transition_ratio = j.at("transition_ratio").get<double>();
    rec.verdict.generations = j.at("generations").get<int>();
    rec.verdict.fitness_trace = j.at("fitness_trace").get<std::vector<double>>();
    records.push_back(std::move(rec));
  }
  return records;
}

FilterStats filter_stats(const std::vector<VerdictRecord>& records) {
  FilterStats s;
  s.total = static_cast<int>(records.size());
  for (const auto& rec : records)
    if (rec.verdict.poisoned) ++s.flagged_poisoned;
  return s;
}

double filtered_asr(Network& net, const Dataset& poisoned, int target,
                    const std::vector<VerdictRecord>& records) {
  if (records.empty()) throw InputError("filtered_asr: no verdicts");
  long hits = 0;
  for (const auto& rec : records) {
    if (rec.verdict.poisoned) continue;  // filtered out, attack blocked
    if (predict_one(net, poisoned.image(rec.id)) == target) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

double clean_path_accuracy(Network& net, const Dataset& clean,
                           const std::vector<VerdictRecord>& records) {
  long passed = 0, correct = 0;
  for (const auto& rec : records) {
    if (rec.verdict.poisoned) continue;
    ++passed;
    if (predict_one(net, clean.image(rec.id)) ==
        static_cast<int>(clean.labels[static_cast<std::size_t>(rec.id)]))
      ++correct;
  }
  return passed > 0 ? static_cast<double>(correct) / static_cast<double>(passed) : 0.0;
}

std::string ExperimentSummary::csv_header() {
  return "seed,attack,n_train,n_test,accu_pre,asr_pre,detect_poisoned_rate,"
         "detect_clean_false_rate,asr_filtered,accu_clean_path,repair_method,accu_post,asr_post";
}

std::string ExperimentSummary::csv_row() const {
  std::ostringstream os;
  os << seed << ',' << attack << ',' << n_train << ',' << n_test << ',' << fmt6(accu_pre) << ','
     << fmt6(asr_pre) << ',' << fmt6(detect_poisoned_rate) << ',' << fmt6(detect_clean_false_rate)
     << ',' << fmt6(asr_filtered) << ',' << fmt6(accu_clean_path) << ',' << repair_method << ','
     << fmt6(accu_post) << ',' << fmt6(asr_post);
  return os.str();
}

namespace {

// Ground-truth repair images: per-class picks stamped by the attack transform
// itself. Used for blended/sig models, where the trigger is not a patch.
RepairSet build_repair_set_ground_truth(const Dataset& pool, const TriggerSpec& spec,
                                        int per_class_count, std::uint64_t seed) {
  const int classes = pool.classes;
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(classes));
  for (int i = 0; i < pool.n(); ++i)
    by_class[pool.labels[static_cast<std::size_t>(i)]].push_back(i);

  RepairSet rs;
  rs.per_class_count = per_class_count;
  std::vector<int> picks;
  for (int c = 0; c < classes; ++c) {
    auto& bucket = by_class[static_cast<std::size_t>(c)];
    if (static_cast<int>(bucket.size()) < per_class_count)
      throw InputError("repair set: class " + std::to_string(c) + " has too few pool images");
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(c)));
    for (int i = static_cast<int>(bucket.size()) - 1; i > 0; --i)
      std::swap(bucket[static_cast<std::size_t>(i)],
                bucket[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    for (int k = 0; k < per_class_count; ++k) picks.push_back(bucket[static_cast<std::size_t>(k)]);
  }
  const int C = pool.channels(), H = pool.height(), W = pool.width();
  const std::size_t sz = static_cast<std::size_t>(C) * H * W;
  rs.images = Tensor({static_cast<int>(picks.size()), C, H, W});
  for (std::size_t k = 0; k < picks.size(); ++k) {
    auto [img, regions] =
        apply_trigger(pool.image(picks[k]), spec, Rng::derive(seed, 1000003ULL + k));
    std::memcpy(rs.images.ptr() + k * sz, img.ptr(), sz * sizeof(float));
    rs.labels.push_back(pool.labels[static_cast<std::size_t>(picks[k])]);
  }
  return rs;
}

struct RepairOutcome {
  RepairReport report;
  std::string trigger_source;
};

// Picks the extracted trigger with the strongest vote; ties take the lowest
// input id.
const VerdictRecord* best_poisoned_verdict(const std::vector<VerdictRecord>& records) {
  const VerdictRecord* best = nullptr;
  for (const auto& rec : records) {
    if (!rec.verdict.poisoned || !rec.verdict.best_region) continue;
    if (!best || rec.verdict.transition_ratio > best->verdict.transition_ratio) best = &rec;
  }
  return best;
}

RepairOutcome run_repair_stage(Network& net, const ExperimentConfig& cfg, const Dataset& test,
                               const Dataset& poisoned_eval,
                               const std::vector<VerdictRecord>& poisoned_verdicts,
                               const Dataset& detect_inputs, std::uint64_t seed) {
  RepairOutcome out;
  const RepairMethod method = cfg.repair_method();
  out.report.method = method;
  out.report.epochs = method == RepairMethod::bn_clean ? cfg.repair.passes : cfg.repair.epochs;
  out.report.images_per_class = cfg.repair.per_class;
  out.report.accu_pre = accuracy(net, test);
  out.report.asr_pre = attack_success_rate(net, poisoned_eval, cfg.attack.target);
  out.report.non_bn_checksum_pre = checksum_tensors(net, false);

  RepairSet rs;
  if (cfg.attack.kind == "patch") {
    const VerdictRecord* best = best_poisoned_verdict(poisoned_verdicts);
    if (best) {
      Tensor patch = best->verdict.extracted_patch;
      if (patch.numel() == 0) {
        // verdicts reloaded from disk carry no pixels; re-crop from the input
        const Tensor input = detect_inputs.image(best->id);
        const Region& r = *best->verdict.best_region;
        patch = Tensor({input.dim(0), r.height, r.width});
        for (int c = 0; c < input.dim(0); ++c)
          for (int rr = 0; rr < r.height; ++rr)
            for (int cc = 0; cc < r.width; ++cc)
              patch.at({c, rr, cc}) = input.at({c, r.row + rr, r.col + cc});
      }
      rs = build_repair_set(test, patch, *best->verdict.best_region, cfg.repair.per_class, seed);
      out.trigger_source = "extracted";
    } else {
      rs = build_repair_set_ground_truth(test, cfg.trigger_spec(), cfg.repair.per_class, seed);
      out.trigger_source = "ground_truth";
    }
  } else {
    rs = build_repair_set_ground_truth(test, cfg.trigger_spec(), cfg.repair.per_class, seed);
    out.trigger_source = "ground_truth";
  }

  const float lr = static_cast<float>(cfg.repair.lr_scale * cfg.train.lr);
  const auto t0 = std::chrono::steady_clock::now();
  switch (method) {
    case RepairMethod::naive:
      naive_unlearn(net, rs, cfg.repair.epochs, lr, Rng::derive(seed, "naive"));
      break;
    case RepairMethod::bn_unlearn:
      bn_unlearn(net, rs, cfg.repair.epochs, lr, Rng::derive(seed, "bn_unlearn"));
      break;
    case RepairMethod::bn_clean:
      bn_clean(net, rs.images, cfg.repair.passes);
      break;
  }
  const auto t1 = std::chrono::steady_clock::now();
  const double secs = std::chrono::duration<double>(t1 - t0).count();
  out.report.seconds_per_epoch = out.report.epochs > 0 ? secs / out.report.epochs : 0.0;

  out.report.accu_post = accuracy(net, test);
  out.report.asr_post = attack_success_rate(net, poisoned_eval, cfg.attack.target);
  out.report.non_bn_checksum_post = checksum_tensors(net, false);
  return out;
}

json repair_report_json(const RepairOutcome& out) {
  json j;
  j["method"] = to_string(out.report.method);
  j["epochs"] = out.report.epochs;
  j["images_per_class"] = out.report.images_per_class;
  j["accu_pre"] = out.report.accu_pre;
  j["accu_post"] = out.report.accu_post;
  j["asr_pre"] = out.report.asr_pre;
  j["asr_post"] = out.report.asr_post;
  j["seconds_per_epoch"] = out.report.seconds_per_epoch;
  j["non_bn_checksum_pre"] = out.report.non_bn_checksum_pre;
  j["non_bn_checksum_post"] = out.report.non_bn_checksum_post;
  j["trigger_source"] = out.trigger_source;
  return j;
}

}  // namespace

ExperimentSummary run_experiment(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  if (cfg.threads > 0) set_parallel_threads(cfg.threads);
  std::filesystem::create_directories(out_dir);
  const auto path = [&](const char* name) { return out_dir + "/" + name; };
  write_file(path("config.cfg"), cfg.to_text());

  ExperimentSummary summary;
  summary.seed = cfg.seed;
  summary.attack = cfg.attack.kind;
  summary.n_train = cfg.dataset.n_train;
  summary.n_test = cfg.dataset.n_test;
  summary.repair_method = cfg.repair.method;

  auto [train_ds, test_ds] = stage("synth", [&] {
    return synth_dataset(stage_seed(cfg.seed, "synth"), cfg.dataset.n_train, cfg.dataset.n_test,
                         cfg.dataset.classes);
  });

  const TriggerSpec spec = cfg.trigger_spec();
  const Dataset poisoned_train = stage("poison", [&] {
    PoisonPolicy policy = cfg.poison_policy();
    policy.seed = stage_seed(cfg.seed, "poison");
    return poison_dataset(train_ds, spec, policy);
  });

  Network net = stage("train", [&] {
    const auto net_cfg = NetworkConfig::reference(
        cfg.network.conv1, cfg.network.conv2, cfg.dataset.classes,
        static_cast<float>(cfg.network.bn_momentum), static_cast<float>(cfg.network.bn_epsilon));
    Network n = Network::init(net_cfg, stage_seed(cfg.seed, "init"));
    train(n, poisoned_train, cfg.train.epochs, static_cast<float>(cfg.train.lr),
          cfg.train.batch_size, stage_seed(cfg.seed, "train"));
    return n;
  });
  save_checkpoint(net, path("model_backdoored.cbdl"));

  const Dataset poisoned_eval = stage("eval", [&] {
    return make_poisoned_eval(test_ds, spec, cfg.attack.target, stage_seed(cfg.seed, "eval"));
  });
  summary.accu_pre = accuracy(net, test_ds);
  summary.asr_pre = attack_success_rate(net, poisoned_eval, cfg.attack.target);
  save_dataset(test_ds, path("clean_test.cbds"));
  save_dataset(poisoned_eval, path("poisoned_test.cbds"));

  const AuxPool pool = AuxPool::from_dataset(net, test_ds);
  const DetectParams params = cfg.detect_params();

  auto [det_poisoned, det_clean, verdicts_poisoned, verdicts_clean] = stage("detect", [&] {
    std::vector<int> successful = successful_attack_indices(net, poisoned_eval, cfg.attack.target);
    if (static_cast<int>(successful.size()) > cfg.detect.n_poisoned)
      successful.resize(static_cast<std::size_t>(cfg.detect.n_poisoned));
    Dataset dp = poisoned_eval.subset(successful);

    std::vector<int> clean_idx;
    for (int i = 0; i < std::min(cfg.detect.n_clean, test_ds.n()); ++i) clean_idx.push_back(i);
    Dataset dc = test_ds.subset(clean_idx);

    auto vp = detect_all(net, dp, params, pool, stage_seed(cfg.seed, "detect_poisoned"));
    auto vc = detect_all(net, dc, params, pool, stage_seed(cfg.seed, "detect_clean"));
    return std::tuple(std::move(dp), std::move(dc), std::move(vp), std::move(vc));
  });
  write_file(path("verdicts_poisoned.jsonl"), verdicts_to_jsonl(verdicts_poisoned));
  write_file(path("verdicts_clean.jsonl"), verdicts_to_jsonl(verdicts_clean));

  summary.detect_poisoned_rate = filter_stats(verdicts_poisoned).flagged_rate();
  summary.detect_clean_false_rate = filter_stats(verdicts_clean).flagged_rate();
  summary.asr_filtered = filtered_asr(net, det_poisoned, cfg.attack.target, verdicts_poisoned);
  summary.accu_clean_path = clean_path_accuracy(net, det_clean, verdicts_clean);

  const RepairOutcome repair_out = stage("repair", [&] {
    return run_repair_stage(net, cfg, test_ds, poisoned_eval, verdicts_poisoned, det_poisoned,
                            stage_seed(cfg.seed, "repair"));
  });
  save_checkpoint(net, path("model_repaired.cbdl"));
  write_file(path("repair_report.json"), repair_report_json(repair_out).dump(2) + "\n");

  summary.accu_post = repair_out.report.accu_post;
  summary.asr_post = repair_out.report.asr_post;

  write_file(path("summary.csv"), ExperimentSummary::csv_header() + "\n" + summary.csv_row() + "\n");
  return summary;
}

std::vector<SweepRow> sweep(const ExperimentConfig& cfg, const std::string& parameter,
                            const std::vector<double>& values, Network& net,
                            const Dataset& poisoned_eval, const AuxPool& pool) {
  if (values.empty()) throw InputError("sweep: no parameter values");
  if (parameter != "individuals" && parameter != "alpha")
    throw ConfigError("sweep: parameter must be 'individuals' or 'alpha'");
  std::vector<SweepRow> rows;
  for (const double v : values) {
    DetectParams params = cfg.detect_params();
    if (parameter == "individuals")
      params.de.population_size = static_cast<int>(v);
    else
      params.de.alpha = v;
    const auto records =
        detect_all(net, poisoned_eval, params, pool, stage_seed(cfg.seed, "sweep"));
    rows.push_back({v, filtered_asr(net, poisoned_eval, cfg.attack.target, records)});
  }
  return rows;
}

std::string sweep_to_csv(const std::string& parameter, const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << parameter << ",post_asr\n";
  for (const auto& row : rows) os << row.value << ',' << fmt6(row.post_asr) << '\n';
  return os.str();
}

TransitionHistogram transition_histogram(Network& net, const Dataset& clean_set,
                                         const Dataset& poisoned_set, const DetectParams& params,
                                         const AuxPool& pool, std::uint64_t seed) {
  TransitionHistogram hist;
  for (const auto& rec : detect_all(net, clean_set, params, pool, Rng::derive(seed, "clean")))
    hist.clean_ratios.push_back(rec.verdict.transition_ratio);
  for (const auto& rec : detect_all(net, poisoned_set, params, pool, Rng::derive(seed, "poisoned")))
    hist.poisoned_ratios.push_back(rec.verdict.transition_ratio);
  return hist;
}

std::string TransitionHistogram::to_csv() const {
  std::array<int, 10> clean_bins{}, poisoned_bins{};
  const auto bin_of = [](double r) { return std::min(9, static_cast<int>(r * 10.0)); };
  for (const double r : clean_ratios) ++clean_bins[static_cast<std::size_t>(bin_of(r))];
  for (const double r : poisoned_ratios) ++poisoned_bins[static_cast<std::size_t>(bin_of(r))];
  std::ostringstream os;
  os << "bin_lo,bin_hi,clean_count,poisoned_count\n";
  for (int b = 0; b < 10; ++b)
    os << fmt6(b / 10.0) << ',' << fmt6((b + 1) / 10.0) << ',' << clean_bins[static_cast<std::size_t>(b)]
       << ',' << poisoned_bins[static_cast<std::size_t>(b)] << '\n';
  return os.str();
}

std::vector<std::string> verify_run(const std::string& run_dir) {
  std::vector<std::string> problems;
  const auto path = [&](const char* name) { return run_dir + "/" + name; };
  const ExperimentConfig cfg = ExperimentConfig::parse(read_file(path("config.cfg")));
  if (cfg.threads > 0) set_parallel_threads(cfg.threads);

  Network backdoored = load_checkpoint(path("model_backdoored.cbdl"));
  Network repaired = load_checkpoint(path("model_repaired.cbdl"));
  const Dataset test_ds = load_dataset(path("clean_test.cbds"));
  const Dataset poisoned_eval = load_dataset(path("poisoned_test.cbds"));
  const auto verdicts_poisoned = parse_verdicts_jsonl(read_file(path("verdicts_poisoned.jsonl")));
  const auto verdicts_clean = parse_verdicts_jsonl(read_file(path("verdicts_clean.jsonl")));

  // rebuild the summary from artifacts
  ExperimentSummary summary;
  summary.seed = cfg.seed;
  summary.attack = cfg.attack.kind;
  summary.n_train = cfg.dataset.n_train;
  summary.n_test = cfg.dataset.n_test;
  summary.repair_method = cfg.repair.method;
  summary.accu_pre = accuracy(backdoored, test_ds);
  summary.asr_pre = attack_success_rate(backdoored, poisoned_eval, cfg.attack.target);

  std::vector<int> successful =
      successful_attack_indices(backdoored, poisoned_eval, cfg.attack.target);
  if (static_cast<int>(successful.size()) > cfg.detect.n_poisoned)
    successful.resize(static_cast<std::size_t>(cfg.detect.n_poisoned));
  const Dataset det_poisoned = poisoned_eval.subset(successful);
  std::vector<int> clean_idx;
  for (int i = 0; i < std::min(cfg.detect.n_clean, test_ds.n()); ++i) clean_idx.push_back(i);
  const Dataset det_clean = test_ds.subset(clean_idx);

  if (static_cast<int>(verdicts_poisoned.size()) != det_poisoned.n())
    problems.push_back("verdict count mismatch on the poisoned batch");
  if (static_cast<int>(verdicts_clean.size()) != det_clean.n())
    problems.push_back("verdict count mismatch on the clean batch");

  summary.detect_poisoned_rate = filter_stats(verdicts_poisoned).flagged_rate();
  summary.detect_clean_false_rate = filter_stats(verdicts_clean).flagged_rate();
  summary.asr_filtered =
      filtered_asr(backdoored, det_poisoned, cfg.attack.target, verdicts_poisoned);
  summary.accu_clean_path = clean_path_accuracy(backdoored, det_clean, verdicts_clean);
  summary.accu_post = accuracy(repaired, test_ds);
  summary.asr_post = attack_success_rate(repaired, poisoned_eval, cfg.attack.target);

  const std::string stored = read_file(path("summary.csv"));
  const std::string expected =
      ExperimentSummary::csv_header() + "\n" + summary.csv_row() + "\n";
  if (stored != expected) problems.push_back("summary.csv does not match recomputed values");

  // paste-and-filter soundness: recount every recorded transition ratio
  const AuxPool pool = AuxPool::from_dataset(backdoored, test_ds);
  const DetectParams params = cfg.detect_params();
  const auto recount = [&](const Dataset& inputs, const std::vector<VerdictRecord>& records,
                           std::uint64_t seed, const char* tag) {
    for (const auto& rec : records) {
      if (!rec.verdict.best_region) continue;
      const Tensor input = inputs.image(rec.id);
      const std::uint64_t de_seed = Rng::derive(seed, static_cast<std::uint64_t>(rec.id));
      const AuxiliarySet aux = build_aux_set(pool, predict_one(backdoored, input),
                                             params.de.aux_count, Rng::derive(de_seed, "aux"));
      FitnessContext ctx = FitnessContext::make(backdoored, input, aux);
      const FitnessBreakdown fb = fitness(*rec.verdict.best_region, ctx);
      if (fb.flips() != rec.verdict.transition_ratio) {
        problems.push_back(std::string(tag) + " verdict " + std::to_string(rec.id) +
                           ": transition ratio does not recount");
        break;
      }
    }
  };
  recount(det_poisoned, verdicts_poisoned, stage_seed(cfg.seed, "detect_poisoned"), "poisoned");
  recount(det_clean, verdicts_clean, stage_seed(cfg.seed, "detect_clean"), "clean");

  // determinism spot check: fully re-derive a few verdicts
  const auto respot = [&](const Dataset& inputs, const std::vector<VerdictRecord>& records,
                          std::uint64_t seed, const char* tag) {
    for (std::size_t i = 0; i < records.size() && i < 3; ++i) {
      DetectParams p = params;
      p.de.seed = Rng::derive(seed, static_cast<std::uint64_t>(records[i].id));
      const DetectionVerdict v = detect(inputs.image(records[i].id), backdoored, p, pool);
      if (v.poisoned != records[i].verdict.poisoned ||
          v.transition_ratio != records[i].verdict.transition_ratio ||
          v.fitness_trace != records[i].verdict.fitness_trace ||
          v.best_region != records[i].verdict.best_region) {
        problems.push_back(std::string(tag) + " verdict " + std::to_string(records[i].id) +
                           ": re-derived verdict differs");
        break;
      }
    }
  };
  respot(det_poisoned, verdicts_poisoned, stage_seed(cfg.seed, "detect_poisoned"), "poisoned");
  respot(det_clean, verdicts_clean, stage_seed(cfg.seed, "detect_clean"), "clean");

  // parameter isolation between the stored checkpoints
  const RepairMethod method = cfg.repair_method();
  const auto pre = backdoored.named_tensors();
  const auto post = repaired.named_tensors();
  for (std::size_t i = 0; i < pre.size(); ++i) {
    const std::string& name = pre[i].first;
    const bool differs = !(pre[i].second->data == post[i].second->data);
    if (!differs) continue;
    const bool is_bn = name.rfind("bn", 0) == 0;
    const bool is_running =
        name.find(".running_mean") != std::string::npos ||
        name.find(".running_var") != std::string::npos;
    if (method == RepairMethod::bn_clean && !is_running)
      problems.push_back("bn_clean touched '" + name + "'");
    else if (method == RepairMethod::bn_unlearn && !is_bn)
      problems.push_back("bn_unlearn touched '" + name + "'");
  }

  return problems;
}

}  // namespace cbd
