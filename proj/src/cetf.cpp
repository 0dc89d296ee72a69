#include "cbd/cetf.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>

#include "cbd/errors.hpp"
#include "cbd/rng.hpp"

namespace cbd {

void DEConfig::validate() const {
  if (population_size < 4) throw ConfigError("de: population size must be at least 4");
  if (!(alpha > 0.0)) throw ConfigError("de: alpha must be positive");
  if (!(crossover_p > 0.0 && crossover_p < 1.0))
    throw ConfigError("de: crossover probability must be in (0,1)");
  if (max_generations < 1) throw ConfigError("de: max generations must be positive");
  if (stagnation_limit < 1) throw ConfigError("de: stagnation limit must be positive");
  if (aux_count < 1) throw ConfigError("de: aux count must be positive");
}

double FitnessBreakdown::score(int flag, int transitions, int aux_size, long region_area,
                               long image_area) {
  return 1000.0 * flag + 1000.0 * (static_cast<double>(transitions) / aux_size) -
         static_cast<double>(region_area) * static_cast<double>(region_area) /
             static_cast<double>(image_area);
}

AuxPool AuxPool::from_dataset(Network& net, const Dataset& pool) {
  AuxPool out;
  out.images = pool.images;
  const int n = pool.n();
  out.predictions.reserve(static_cast<std::size_t>(n));
  const int C = pool.channels(), H = pool.height(), W = pool.width();
  const std::size_t sz = static_cast<std::size_t>(C) * H * W;
  constexpr int kChunk = 128;
  for (int start = 0; start < n; start += kChunk) {
    const int b = std::min(kChunk, n - start);
    Tensor batch({b, C, H, W});
    std::memcpy(batch.ptr(), pool.images.ptr() + static_cast<std::size_t>(start) * sz,
                static_cast<std::size_t>(b) * sz * sizeof(float));
    for (const int p : predict(net, batch)) out.predictions.push_back(p);
  }
  return out;
}

AuxiliarySet build_aux_set(const AuxPool& pool, int input_prediction, int h, std::uint64_t seed) {
  const int n = static_cast<int>(pool.predictions.size());
  if (n < h) throw InputError("aux pool must contain at least h images");

  // bucket candidate images by predicted class, excluding the input's class
  int max_class = 0;
  for (const int p : pool.predictions) max_class = std::max(max_class, p);
  std::vector<std::vector<int>> buckets(static_cast<std::size_t>(max_class) + 1);
  for (int i = 0; i < n; ++i)
    if (pool.predictions[static_cast<std::size_t>(i)] != input_prediction)
      buckets[static_cast<std::size_t>(pool.predictions[static_cast<std::size_t>(i)])].push_back(i);
  for (std::size_t c = 0; c < buckets.size(); ++c) {
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(c)));
    auto& b = buckets[c];
    for (int i = static_cast<int>(b.size()) - 1; i > 0; --i)
      std::swap(b[static_cast<std::size_t>(i)], b[static_cast<std::size_t>(rng.uniform_int(0, i))]);
  }

  // round-robin over classes: distinct predicted classes where possible
  std::vector<int> picks;
  for (std::size_t round = 0; static_cast<int>(picks.size()) < h; ++round) {
    bool any = false;
    for (auto& b : buckets) {
      if (round < b.size()) {
        picks.push_back(b[round]);
        any = true;
        if (static_cast<int>(picks.size()) == h) break;
      }
    }
    if (!any) break;
  }
  // degenerate pools: fill from images sharing the input's prediction
  if (static_cast<int>(picks.size()) < h) {
    std::vector<int> rest;
    for (int i = 0; i < n; ++i)
      if (pool.predictions[static_cast<std::size_t>(i)] == input_prediction) rest.push_back(i);
    Rng rng(Rng::derive(seed, "fill"));
    for (int i = static_cast<int>(rest.size()) - 1; i > 0; --i)
      std::swap(rest[static_cast<std::size_t>(i)],
                rest[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    for (const int i : rest) {
      if (static_cast<int>(picks.size()) == h) break;
      picks.push_back(i);
    }
  }

  const int C = pool.images.dim(1), H = pool.images.dim(2), W = pool.images.dim(3);
  const std::size_t sz = static_cast<std::size_t>(C) * H * W;
  AuxiliarySet aux;
  aux.images = Tensor({static_cast<int>(picks.size()), C, H, W});
  for (std::size_t k = 0; k < picks.size(); ++k) {
    std::memcpy(aux.images.ptr() + k * sz,
                pool.images.ptr() + static_cast<std::size_t>(picks[k]) * sz, sz * sizeof(float));
    aux.predictions.push_back(pool.predictions[static_cast<std::size_t>(picks[k])]);
  }
  return aux;
}

namespace {

std::vector<float> image_channel_means(const Tensor& image) {
  const int C = image.dim(0);
  const std::size_t plane = static_cast<std::size_t>(image.dim(1)) * image.dim(2);
  std::vector<float> means(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    double sum = 0.0;
    const float* p = image.ptr() + static_cast<std::size_t>(c) * plane;
    for (std::size_t i = 0; i < plane; ++i) sum += p[i];
    means[static_cast<std::size_t>(c)] = static_cast<float>(sum / static_cast<double>(plane));
  }
  return means;
}

void check_region(const Tensor& image, const Region& region, const char* op) {
  if (!region.inside(image.dim(1), image.dim(2)))
    throw InputError(std::string(op) + ": region out of image bounds");
}

void paint_region(float* img, int C, int H, int W, const Region& rg, const float* values,
                  bool per_channel_constant) {
  for (int c = 0; c < C; ++c) {
    float* plane = img + static_cast<std::size_t>(c) * H * W;
    for (int r = 0; r < rg.height; ++r) {
      float* row = plane + static_cast<std::size_t>(rg.row + r) * W + rg.col;
      if (per_channel_constant) {
        for (int cc = 0; cc < rg.width; ++cc) row[cc] = values[c];
      } else {
        const float* src = values + (static_cast<std::size_t>(c) * H + rg.row + r) * W + rg.col;
        for (int cc = 0; cc < rg.width; ++cc) row[cc] = src[cc];
      }
    }
  }
}

}  // namespace

Tensor mask_region(const Tensor& image, const Region& region) {
  check_region(image, region, "mask_region");
  const auto means = image_channel_means(image);
  Tensor out = image;
  paint_region(out.ptr(), image.dim(0), image.dim(1), image.dim(2), region, means.data(), true);
  return out;
}

Tensor paste_region(const Tensor& source, const Region& region, const Tensor& target) {
  if (!source.same_shape(target)) throw InputError("paste_region: image shape mismatch");
  check_region(source, region, "paste_region");
  Tensor out = target;
  paint_region(out.ptr(), source.dim(0), source.dim(1), source.dim(2), region, source.ptr(),
               false);
  return out;
}

FitnessContext FitnessContext::make(Network& net, const Tensor& input, const AuxiliarySet& aux) {
  FitnessContext ctx;
  ctx.net = &net;
  ctx.input = &input;
  ctx.input_prediction = predict_one(net, input);
  ctx.channel_means = image_channel_means(input);
  ctx.aux = &aux;
  ctx.image_area = static_cast<long>(input.dim(1)) * input.dim(2);
  return ctx;
}

FitnessBreakdown fitness(const Region& region, FitnessContext& ctx) {
  const Tensor& input = *ctx.input;
  check_region(input, region, "fitness");
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const std::size_t sz = static_cast<std::size_t>(C) * H * W;
  const int h = ctx.aux->size();

  // one batch: the masked input followed by the region pasted on every aux image
  Tensor batch({1 + h, C, H, W});
  std::memcpy(batch.ptr(), input.ptr(), sz * sizeof(float));
  paint_region(batch.ptr(), C, H, W, region, ctx.channel_means.data(), true);
  for (int i = 0; i < h; ++i) {
    float* dst = batch.ptr() + static_cast<std::size_t>(1 + i) * sz;
    std::memcpy(dst, ctx.aux->images.ptr() + static_cast<std::size_t>(i) * sz,
                sz * sizeof(float));
    paint_region(dst, C, H, W, region, input.ptr(), false);
  }
  const std::vector<int> preds = predict(*ctx.net, batch);

  FitnessBreakdown out;
  out.flag = preds[0] != ctx.input_prediction ? 1 : 0;
  for (int i = 0; i < h; ++i)
    if (preds[static_cast<std::size_t>(1 + i)] == ctx.input_prediction) ++out.transitions;
  out.aux_size = h;
  out.region_area = region.area();
  out.image_area = ctx.image_area;
  out.total = FitnessBreakdown::score(out.flag, out.transitions, h, out.region_area,
                                      out.image_area);
  ctx.evaluations += 1;
  ctx.image_forwards += 1 + h;
  return out;
}

namespace {

using Vec4 = std::array<double, 4>;

Region region_from_vector(const Vec4& u, const Region& range) {
  const int r0 = range.row, c0 = range.col;
  const int rh = range.height, rw = range.width;
  Region rg;
  rg.row = std::clamp(static_cast<int>(std::lround(u[0])), r0, r0 + rh - 1);
  rg.col = std::clamp(static_cast<int>(std::lround(u[1])), c0, c0 + rw - 1);
  rg.height = std::clamp(static_cast<int>(std::lround(u[2])), 1, r0 + rh - rg.row);
  rg.width = std::clamp(static_cast<int>(std::lround(u[3])), 1, c0 + rw - rg.col);
  return rg;
}

}  // namespace

DeResult de_search(const Tensor& input, Network& net, const PriorRegion& prior,
                   const DEConfig& cfg, const AuxiliarySet& aux) {
  cfg.validate();
  if (aux.size() != cfg.aux_count)
    throw ConfigError("de: auxiliary set size does not match aux_count");

  const Region range = prior.empty ? Region{0, 0, input.dim(1), input.dim(2)} : prior.region;
  FitnessContext ctx = FitnessContext::make(net, input, aux);
  Rng rng(cfg.seed);

  const int P = cfg.population_size;
  std::vector<Vec4> pop(static_cast<std::size_t>(P));
  std::vector<FitnessBreakdown> fit(static_cast<std::size_t>(P));
  for (auto& u : pop) {
    u[0] = rng.uniform(range.row, range.row + range.height - 1);
    u[1] = rng.uniform(range.col, range.col + range.width - 1);
    u[2] = rng.uniform(1.0, range.height);
    u[3] = rng.uniform(1.0, range.width);
  }
  for (int i = 0; i < P; ++i)
    fit[static_cast<std::size_t>(i)] = fitness(region_from_vector(pop[static_cast<std::size_t>(i)], range), ctx);

  const auto best_index = [&] {
    int best = 0;
    for (int i = 1; i < P; ++i)
      if (fit[static_cast<std::size_t>(i)].total > fit[static_cast<std::size_t>(best)].total)
        best = i;
    return best;
  };

  DeResult result;
  double best_total = fit[static_cast<std::size_t>(best_index())].total;
  result.trace.push_back(best_total);

  int trapped = 0;
  std::vector<Vec4> offspring(static_cast<std::size_t>(P));
  for (int gen = 1; gen <= cfg.max_generations; ++gen) {
    result.generations = gen;
    // mutation + crossover from the generation's population snapshot
    for (int i = 0; i < P; ++i) {
      int i1 = rng.uniform_int(0, P - 1);
      while (i1 == i) i1 = rng.uniform_int(0, P - 1);
      int i2 = rng.uniform_int(0, P - 1);
      while (i2 == i || i2 == i1) i2 = rng.uniform_int(0, P - 1);
      Vec4 v;
      for (int j = 0; j < 4; ++j)
        v[static_cast<std::size_t>(j)] =
            pop[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] +
            cfg.alpha * (pop[static_cast<std::size_t>(i1)][static_cast<std::size_t>(j)] -
                         pop[static_cast<std::size_t>(i2)][static_cast<std::size_t>(j)]);
      for (int j = 0; j < 4; ++j) {
        const double gamma = rng.uniform();
        offspring[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
            gamma < cfg.crossover_p ? v[static_cast<std::size_t>(j)]
                                    : pop[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      }
    }
    // pairwise elitist selection; ties keep the parent
    for (int i = 0; i < P; ++i) {
      const FitnessBreakdown off_fit =
          fitness(region_from_vector(offspring[static_cast<std::size_t>(i)], range), ctx);
      if (fit[static_cast<std::size_t>(i)].total < off_fit.total) {
        pop[static_cast<std::size_t>(i)] = offspring[static_cast<std::size_t>(i)];
        fit[static_cast<std::size_t>(i)] = off_fit;
      }
    }
    const double gen_best = fit[static_cast<std::size_t>(best_index())].total;
    result.trace.push_back(gen_best);
    if (std::fabs(gen_best - best_total) < 1e-6) {
      ++trapped;
      if (trapped > cfg.stagnation_limit) break;
    } else {
      trapped = 0;
      best_total = gen_best;
    }
  }

  result.evaluations = ctx.evaluations;
  result.image_forwards = ctx.image_forwards;
  const int best = best_index();
  if (fit[static_cast<std::size_t>(best)].total < 0.0) return result;  // nothing influential found
  result.best = region_from_vector(pop[static_cast<std::size_t>(best)], range);
  result.best_breakdown = fit[static_cast<std::size_t>(best)];
  return result;
}

namespace {

Tensor crop(const Tensor& image, const Region& rg) {
  const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
  Tensor out({C, rg.height, rg.width});
  for (int c = 0; c < C; ++c)
    for (int r = 0; r < rg.height; ++r)
      for (int cc = 0; cc < rg.width; ++cc)
        out.at({c, r, cc}) = image.data[(static_cast<std::size_t>(c) * H + rg.row + r) * W +
                                        rg.col + cc];
  return out;
}

}  // namespace

DetectionVerdict detect(const Tensor& input, Network& net, const DetectParams& params,
                        const AuxPool& pool) {
  DetectionVerdict verdict;
  verdict.input_prediction = predict_one(net, input);

  const SalientMap map = gradcam(net, input, verdict.input_prediction);
  const PriorRegion prior = prior_region(map, params.cam_threshold, params.dilation_frac);

  const AuxiliarySet aux = build_aux_set(pool, verdict.input_prediction, params.de.aux_count,
                                         Rng::derive(params.de.seed, "aux"));
  const DeResult de = de_search(input, net, prior, params.de, aux);

  verdict.fitness_trace = de.trace;
  verdict.generations = de.generations;
  verdict.evaluations = de.evaluations;
  verdict.image_forwards = de.image_forwards;

  if (!de.best) return verdict;  // nothing found: the input is ruled clean directly

  verdict.best_region = de.best;
  // paste-and-filter vote on the same h clean images
  verdict.transition_ratio = de.best_breakdown.flips();
  verdict.poisoned = verdict.transition_ratio > params.verdict_threshold;
  if (verdict.poisoned) verdict.extracted_patch = crop(input, *de.best);
  return verdict;
}

}  // namespace cbd
