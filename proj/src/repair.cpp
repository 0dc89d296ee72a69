#include "cbd/repair.hpp"

#include <algorithm>
#include <cstring>

#include "cbd/cetf.hpp"
#include "cbd/errors.hpp"
#include "cbd/rng.hpp"

namespace cbd {

std::string to_string(RepairMethod m) {
  switch (m) {
    case RepairMethod::naive: return "naive";
    case RepairMethod::bn_unlearn: return "bn_unlearn";
    default: return "bn_clean";
  }
}

RepairMethod repair_method_from_string(const std::string& s) {
  if (s == "naive") return RepairMethod::naive;
  if (s == "bn_unlearn") return RepairMethod::bn_unlearn;
  if (s == "bn_clean") return RepairMethod::bn_clean;
  throw ConfigError("unknown repair method '" + s + "'");
}

RepairSet build_repair_set(const Dataset& validation_pool, const Tensor& extracted_patch,
                           const Region& region, int per_class_count, std::uint64_t seed) {
  if (per_class_count < 1) throw InputError("repair set: per-class count must be positive");
  const int classes = validation_pool.classes;
  const int C = validation_pool.channels(), H = validation_pool.height(),
            W = validation_pool.width();
  if (!region.inside(H, W)) throw InputError("repair set: region out of bounds");
  if (extracted_patch.rank() != 3 || extracted_patch.dim(0) != C ||
      extracted_patch.dim(1) != region.height || extracted_patch.dim(2) != region.width)
    throw InputError("repair set: patch does not match region");

  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(classes));
  for (int i = 0; i < validation_pool.n(); ++i)
    by_class[validation_pool.labels[static_cast<std::size_t>(i)]].push_back(i);

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

  RepairSet rs;
  rs.per_class_count = per_class_count;
  rs.images = Tensor({static_cast<int>(picks.size()), C, H, W});
  const std::size_t sz = static_cast<std::size_t>(C) * H * W;
  for (std::size_t k = 0; k < picks.size(); ++k) {
    Tensor img = validation_pool.image(picks[k]);
    // stamp the extracted trigger at its original coordinates
    for (int c = 0; c < C; ++c)
      for (int r = 0; r < region.height; ++r)
        for (int cc = 0; cc < region.width; ++cc)
          img.at({c, region.row + r, region.col + cc}) = extracted_patch.at({c, r, cc});
    std::memcpy(rs.images.ptr() + k * sz, img.ptr(), sz * sizeof(float));
    rs.labels.push_back(validation_pool.labels[static_cast<std::size_t>(picks[k])]);
  }
  return rs;
}

namespace {

// Repair batches: the whole set when small, else 32 (BN statistics need
// multi-image batches).
int repair_batch_size(int n) { return n <= 64 ? n : 32; }

void finetune(Network& net, const RepairSet& rs, int epochs, float lr, std::uint64_t seed,
              ParamMask mask) {
  const int n = rs.images.dim(0);
  if (n == 0) throw InputError("repair: empty repair set");
  const int C = rs.images.dim(1), H = rs.images.dim(2), W = rs.images.dim(3);
  const std::size_t sz = static_cast<std::size_t>(C) * H * W;
  const int bsz_cap = repair_batch_size(n);

  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(epoch)));
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    for (int start = 0; start < n; start += bsz_cap) {
      const int bsz = std::min(bsz_cap, n - start);
      if (bsz < 2) break;
      Tensor batch({bsz, C, H, W});
      std::vector<std::uint16_t> labels(static_cast<std::size_t>(bsz));
      for (int b = 0; b < bsz; ++b) {
        const int src = order[static_cast<std::size_t>(start + b)];
        std::memcpy(batch.ptr() + static_cast<std::size_t>(b) * sz,
                    rs.images.ptr() + static_cast<std::size_t>(src) * sz, sz * sizeof(float));
        labels[static_cast<std::size_t>(b)] = rs.labels[static_cast<std::size_t>(src)];
      }
      auto [loss, grads] = loss_and_grads(net, batch, labels, mask);
      (void)loss;
      sgd_step(net, grads, lr);
    }
  }
}

}  // namespace

void naive_unlearn(Network& net, const RepairSet& rs, int epochs, float lr, std::uint64_t seed) {
  finetune(net, rs, epochs, lr, seed, ParamMask::all);
}

void bn_unlearn(Network& net, const RepairSet& rs, int epochs, float lr, std::uint64_t seed) {
  if (!net.has_batchnorm())
    throw UnsupportedModelError("bn_unlearn: model has no batch-normalization layers");
  finetune(net, rs, epochs, lr, seed, ParamMask::bn_only);
}

void bn_clean(Network& net, const Tensor& repair_images, int passes) {
  if (!net.has_batchnorm())
    throw UnsupportedModelError("bn_clean: model has no batch-normalization layers");
  if (repair_images.rank() != 4 || repair_images.dim(0) == 0)
    throw InputError("bn_clean: need a non-empty NxCxHxW image stack");
  const int n = repair_images.dim(0);
  const int C = repair_images.dim(1), H = repair_images.dim(2), W = repair_images.dim(3);
  const std::size_t sz = static_cast<std::size_t>(C) * H * W;
  const int bsz_cap = repair_batch_size(n);
  for (int pass = 0; pass < passes; ++pass) {
    for (int start = 0; start < n; start += bsz_cap) {
      const int bsz = std::min(bsz_cap, n - start);
      if (bsz < 2) break;
      Tensor batch({bsz, C, H, W});
      std::memcpy(batch.ptr(), repair_images.ptr() + static_cast<std::size_t>(start) * sz,
                  static_cast<std::size_t>(bsz) * sz * sizeof(float));
      forward(net, batch, Mode::train);  // running stats refresh; no gradients anywhere
    }
  }
}

}  // namespace cbd
