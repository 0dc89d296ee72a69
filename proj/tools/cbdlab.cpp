// cbdlab: train a backdoored glyph classifier, hunt its trigger with the
// evolutionary filter, and repair the model. Every subcommand is a thin
// wrapper over the library; all randomness flows from --seed.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cbd/checkpoint.hpp"
#include "cbd/config.hpp"
#include "cbd/harness.hpp"
#include "cbd/parallel.hpp"
#include "cbd/poison.hpp"
#include "cbd/rng.hpp"
#include "cbd/saliency.hpp"

namespace {

using namespace cbd;

struct GlobalOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  int threads = 0;
};

ExperimentConfig resolve_config(const GlobalOpts& g) {
  ExperimentConfig cfg =
      g.config_path.empty() ? ExperimentConfig{} : ExperimentConfig::load(g.config_path);
  if (g.seed) cfg.seed = *g.seed;
  if (g.threads > 0) cfg.threads = g.threads;
  cfg.validate();
  if (cfg.threads > 0) set_parallel_threads(cfg.threads);
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot open '" + path + "' for writing");
  f << text;
}

Network train_model(const ExperimentConfig& cfg, const Dataset& data) {
  const auto net_cfg = NetworkConfig::reference(
      cfg.network.conv1, cfg.network.conv2, cfg.dataset.classes,
      static_cast<float>(cfg.network.bn_momentum), static_cast<float>(cfg.network.bn_epsilon));
  Network net = Network::init(net_cfg, stage_seed(cfg.seed, "init"));
  const TrainResult tr = train(net, data, cfg.train.epochs, static_cast<float>(cfg.train.lr),
                               cfg.train.batch_size, stage_seed(cfg.seed, "train"));
  for (std::size_t e = 0; e < tr.epoch_loss.size(); ++e)
    std::printf("epoch %zu loss %.4f\n", e + 1, static_cast<double>(tr.epoch_loss[e]));
  return net;
}

std::vector<double> parse_values(const std::string& csv) {
  std::vector<double> values;
  std::istringstream is(csv);
  std::string tok;
  while (std::getline(is, tok, ',')) values.push_back(std::stod(tok));
  return values;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale backdoor defense laboratory"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--config", g.config_path, "experiment config file");
  app.add_option("--seed", g.seed, "root seed (overrides config)");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--threads", g.threads, "worker threads for detection jobs");

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "generate the glyph dataset");
  // poison
  auto* poison_cmd = app.add_subcommand("poison", "apply the attack to a dataset");
  std::string poison_in;
  poison_cmd->add_option("--data", poison_in, "input dataset (.cbds)")->required();
  // train
  auto* train_cmd = app.add_subcommand("train", "train the classifier");
  std::string train_in;
  train_cmd->add_option("--data", train_in, "training dataset (.cbds)")->required();
  // eval
  auto* eval_cmd = app.add_subcommand("eval", "accuracy / attack success rate");
  std::string eval_model, eval_clean, eval_poisoned;
  eval_cmd->add_option("--model", eval_model)->required();
  eval_cmd->add_option("--clean", eval_clean)->required();
  eval_cmd->add_option("--poisoned", eval_poisoned);
  // detect
  auto* detect_cmd = app.add_subcommand("detect", "run the trigger filter over a dataset");
  std::string det_model, det_data, det_pool;
  int det_limit = 0;
  bool det_dump_cam = false;
  detect_cmd->add_option("--model", det_model)->required();
  detect_cmd->add_option("--data", det_data)->required();
  detect_cmd->add_option("--pool", det_pool, "clean pool dataset")->required();
  detect_cmd->add_option("--limit", det_limit, "detect only the first N inputs");
  detect_cmd->add_flag("--dump-cam", det_dump_cam, "write salient maps as PGM");
  // repair
  auto* repair_cmd = app.add_subcommand("repair", "unlearn the backdoor");
  std::string rep_model, rep_pool, rep_verdicts, rep_verdict_data;
  repair_cmd->add_option("--model", rep_model)->required();
  repair_cmd->add_option("--pool", rep_pool, "clean pool with true labels")->required();
  repair_cmd->add_option("--verdicts", rep_verdicts, "verdicts.jsonl with the extracted trigger");
  repair_cmd->add_option("--verdict-data", rep_verdict_data,
                         "dataset the verdicts refer to (for patch pixels)");
  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "post-defense ASR over a parameter range");
  std::string sweep_param, sweep_values, sweep_model, sweep_data, sweep_pool;
  sweep_cmd->add_option("--parameter", sweep_param, "individuals | alpha")->required();
  sweep_cmd->add_option("--values", sweep_values, "comma-separated values")->required();
  sweep_cmd->add_option("--model", sweep_model)->required();
  sweep_cmd->add_option("--data", sweep_data, "poisoned evaluation dataset")->required();
  sweep_cmd->add_option("--pool", sweep_pool, "clean pool dataset")->required();
  // histogram
  auto* hist_cmd = app.add_subcommand("histogram", "transition-ratio distributions");
  std::string hist_model, hist_clean, hist_poisoned, hist_pool;
  hist_cmd->add_option("--model", hist_model)->required();
  hist_cmd->add_option("--clean", hist_clean)->required();
  hist_cmd->add_option("--poisoned", hist_poisoned)->required();
  hist_cmd->add_option("--pool", hist_pool)->required();
  // run-all + verify
  auto* runall_cmd = app.add_subcommand("run-all", "full pipeline into --out");
  auto* verify_cmd = app.add_subcommand("verify", "recompute a run directory's numbers");
  std::string verify_dir;
  verify_cmd->add_option("--run", verify_dir, "run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    const ExperimentConfig cfg = resolve_config(g);
    std::filesystem::create_directories(g.out);

    if (synth_cmd->parsed()) {
      auto [train_ds, test_ds] = synth_dataset(stage_seed(cfg.seed, "synth"),
                                               cfg.dataset.n_train, cfg.dataset.n_test,
                                               cfg.dataset.classes);
      save_dataset(train_ds, g.out + "/train.cbds");
      save_dataset(test_ds, g.out + "/test.cbds");
      std::printf("wrote %s/train.cbds (%d) and %s/test.cbds (%d)\n", g.out.c_str(), train_ds.n(),
                  g.out.c_str(), test_ds.n());
    } else if (poison_cmd->parsed()) {
      const Dataset ds = load_dataset(poison_in);
      PoisonPolicy policy = cfg.poison_policy();
      policy.seed = stage_seed(cfg.seed, "poison");
      const Dataset poisoned = poison_dataset(ds, cfg.trigger_spec(), policy);
      save_dataset(poisoned, g.out + "/poisoned.cbds");
      long flagged = 0;
      for (const auto f : poisoned.poisoned_flags) flagged += f;
      std::printf("wrote %s/poisoned.cbds (%ld of %d poisoned)\n", g.out.c_str(), flagged,
                  poisoned.n());
    } else if (train_cmd->parsed()) {
      const Dataset data = load_dataset(train_in);
      Network net = train_model(cfg, data);
      save_checkpoint(net, g.out + "/model.cbdl");
      std::printf("wrote %s/model.cbdl\n", g.out.c_str());
    } else if (eval_cmd->parsed()) {
      Network net = load_checkpoint(eval_model);
      const Dataset clean = load_dataset(eval_clean);
      if (eval_poisoned.empty()) {
        std::printf("accu %.4f n %d\n", accuracy(net, clean), clean.n());
      } else {
        const Dataset poisoned = load_dataset(eval_poisoned);
        const MetricsReport r = evaluate(net, clean, poisoned, cfg.attack.target);
        std::printf("accu %.4f (n=%d) asr %.4f (m=%d, target=%d)\n", r.accu, r.n, r.asr, r.m,
                    r.target_label);
      }
    } else if (detect_cmd->parsed()) {
      Network net = load_checkpoint(det_model);
      Dataset data = load_dataset(det_data);
      if (det_limit > 0 && data.n() > det_limit) {
        std::vector<int> idx(static_cast<std::size_t>(det_limit));
        for (int i = 0; i < det_limit; ++i) idx[static_cast<std::size_t>(i)] = i;
        data = data.subset(idx);
      }
      const Dataset pool_ds = load_dataset(det_pool);
      const AuxPool pool = AuxPool::from_dataset(net, pool_ds);
      const auto records =
          detect_all(net, data, cfg.detect_params(), pool, stage_seed(cfg.seed, "detect"));
      write_text(g.out + "/verdicts.jsonl", verdicts_to_jsonl(records));
      if (det_dump_cam) {
        for (const auto& rec : records) {
          const Tensor img = data.image(rec.id);
          const SalientMap map = gradcam(net, img, predict_one(net, img));
          write_pgm(map.values, g.out + "/cam_" + std::to_string(rec.id) + ".pgm");
        }
      }
      const FilterStats stats = filter_stats(records);
      std::printf("wrote %s/verdicts.jsonl: %d of %d flagged poisoned\n", g.out.c_str(),
                  stats.flagged_poisoned, stats.total);
    } else if (repair_cmd->parsed()) {
      Network net = load_checkpoint(rep_model);
      const Dataset pool_ds = load_dataset(rep_pool);
      RepairSet rs;
      if (!rep_verdicts.empty()) {
        std::ifstream f(rep_verdicts);
        if (!f) throw InputError("cannot open '" + rep_verdicts + "'");
        std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        const auto records = parse_verdicts_jsonl(text);
        const Dataset vdata = load_dataset(rep_verdict_data.empty() ? rep_pool : rep_verdict_data);
        const VerdictRecord* best = nullptr;
        for (const auto& rec : records)
          if (rec.verdict.poisoned && rec.verdict.best_region &&
              (!best || rec.verdict.transition_ratio > best->verdict.transition_ratio))
            best = &rec;
        if (!best) throw InputError("repair: verdicts contain no extracted trigger");
        const Tensor input = vdata.image(best->id);
        const Region& r = *best->verdict.best_region;
        Tensor patch({input.dim(0), r.height, r.width});
        for (int c = 0; c < input.dim(0); ++c)
          for (int rr = 0; rr < r.height; ++rr)
            for (int cc = 0; cc < r.width; ++cc)
              patch.at({c, rr, cc}) = input.at({c, r.row + rr, r.col + cc});
        rs = build_repair_set(pool_ds, patch, r, cfg.repair.per_class,
                              stage_seed(cfg.seed, "repair"));
      } else {
        throw InputError("repair: --verdicts is required (or use run-all)");
      }
      const float lr = static_cast<float>(cfg.repair.lr_scale * cfg.train.lr);
      switch (cfg.repair_method()) {
        case RepairMethod::naive:
          naive_unlearn(net, rs, cfg.repair.epochs, lr, stage_seed(cfg.seed, "naive"));
          break;
        case RepairMethod::bn_unlearn:
          bn_unlearn(net, rs, cfg.repair.epochs, lr, stage_seed(cfg.seed, "bn_unlearn"));
          break;
        case RepairMethod::bn_clean:
          bn_clean(net, rs.images, cfg.repair.passes);
          break;
      }
      save_checkpoint(net, g.out + "/repaired.cbdl");
      std::printf("wrote %s/repaired.cbdl (%s)\n", g.out.c_str(), cfg.repair.method.c_str());
    } else if (sweep_cmd->parsed()) {
      Network net = load_checkpoint(sweep_model);
      const Dataset data = load_dataset(sweep_data);
      const AuxPool pool = AuxPool::from_dataset(net, load_dataset(sweep_pool));
      const auto rows = sweep(cfg, sweep_param, parse_values(sweep_values), net, data, pool);
      write_text(g.out + "/sweep.csv", sweep_to_csv(sweep_param, rows));
      std::printf("wrote %s/sweep.csv\n", g.out.c_str());
    } else if (hist_cmd->parsed()) {
      Network net = load_checkpoint(hist_model);
      const Dataset clean = load_dataset(hist_clean);
      const Dataset poisoned = load_dataset(hist_poisoned);
      const AuxPool pool = AuxPool::from_dataset(net, load_dataset(hist_pool));
      const TransitionHistogram hist = transition_histogram(
          net, clean, poisoned, cfg.detect_params(), pool, stage_seed(cfg.seed, "histogram"));
      write_text(g.out + "/histogram.csv", hist.to_csv());
      std::printf("wrote %s/histogram.csv\n", g.out.c_str());
    } else if (runall_cmd->parsed()) {
      const ExperimentSummary summary = run_experiment(cfg, g.out);
      std::printf("%s\n%s\n", ExperimentSummary::csv_header().c_str(),
                  summary.csv_row().c_str());
    } else if (verify_cmd->parsed()) {
      const auto problems = verify_run(verify_dir);
      if (problems.empty()) {
        std::printf("verify: ok\n");
      } else {
        for (const auto& p : problems) std::fprintf(stderr, "verify: %s\n", p.c_str());
        return 4;
      }
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const UnsupportedModelError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return 3;
  } catch (const InputError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
