#include "airtopo/losses.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>

#include "airtopo/distance.hpp"
#include "airtopo/error.hpp"
#include "airtopo/parallel.hpp"
#include "airtopo/skeleton.hpp"

namespace airtopo {

namespace {

// Deterministic parallel reduction: fixed chunk boundaries, partials summed
// in chunk order so results do not depend on the thread count.
template <typename Fn>
double chunked_sum(std::int64_t n, Fn&& per_voxel) {
  constexpr int kChunks = 64;
  const std::int64_t step = (n + kChunks - 1) / kChunks;
  std::array<double, kChunks> partial{};
  parallel_chunks(kChunks, [&](std::int64_t cb, std::int64_t ce) {
    for (std::int64_t c = cb; c < ce; ++c) {
      double acc = 0.0;
      const std::int64_t lo = c * step;
      const std::int64_t hi = std::min(n, lo + step);
      for (std::int64_t i = lo; i < hi; ++i) acc += per_voxel(i);
      partial[static_cast<std::size_t>(c)] = acc;
    }
  });
  double total = 0.0;
  for (double p : partial) total += p;
  return total;
}

void require_prob_grid(const Volume& p, const char* who) {
  if (p.kind() != ElementKind::Real32)
    throw DataError(std::string(who) + ": probability grid must be real32");
}

}  // namespace

const VolumeGeometry& ProbVolume::geom() const {
  if (class_probs.empty())
    throw DataError("ProbVolume: no class grids");
  return class_probs.front().geom();
}

void ProbVolume::validate() const {
  if (k() < 2) throw DataError("ProbVolume: needs at least 2 classes");
  const VolumeGeometry& g = geom();
  for (const Volume& c : class_probs) {
    require_prob_grid(c, "ProbVolume");
    require_same_grid(g, c.geom(), "ProbVolume");
  }
  const std::int64_t n = g.voxel_count();
  std::vector<const float*> grids;
  for (const Volume& c : class_probs) grids.push_back(c.f32().data());
  std::atomic<bool> ok{true};
  parallel_chunks(n, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t i = b; i < e; ++i) {
      double sum = 0.0;
      for (const float* gr : grids) {
        const float v = gr[i];
        if (!(v >= 0.0f && v <= 1.0f)) ok.store(false, std::memory_order_relaxed);
        sum += v;
      }
      if (std::abs(sum - 1.0) > 1e-5) ok.store(false, std::memory_order_relaxed);
    }
  });
  if (!ok.load())
    throw DataError("ProbVolume: probabilities must be in [0,1] and sum to 1");
}

ProbVolume ProbVolume::from_binary(const Volume& mask) {
  require_binary_mask(mask, "ProbVolume::from_binary");
  ProbVolume out;
  out.class_probs.push_back(Volume::real32(mask.geom()));
  out.class_probs.push_back(Volume::real32(mask.geom()));
  auto bg = out.class_probs[0].f32();
  auto fg = out.class_probs[1].f32();
  const auto mv = mask.u8();
  for (std::int64_t i = 0; i < mask.geom().voxel_count(); ++i) {
    fg[static_cast<std::size_t>(i)] = mv[static_cast<std::size_t>(i)] ? 1.0f : 0.0f;
    bg[static_cast<std::size_t>(i)] = mv[static_cast<std::size_t>(i)] ? 0.0f : 1.0f;
  }
  return out;
}

double dice_loss(const Volume& p_class, const Volume& g) {
  require_prob_grid(p_class, "dice_loss");
  require_binary_mask(g, "dice_loss g");
  require_same_grid(p_class.geom(), g.geom(), "dice_loss");
  const float* p = p_class.f32().data();
  const std::uint8_t* gv = g.u8().data();
  const std::int64_t n = g.geom().voxel_count();
  const double inter = chunked_sum(n, [&](std::int64_t i) {
    return gv[i] ? static_cast<double>(p[i]) : 0.0;
  });
  const double sum_p =
      chunked_sum(n, [&](std::int64_t i) { return static_cast<double>(p[i]); });
  const double sum_g =
      chunked_sum(n, [&](std::int64_t i) { return gv[i] ? 1.0 : 0.0; });
  return 1.0 - (2.0 * inter + kDiceEpsilon) / (sum_p + sum_g + kDiceEpsilon);
}

double ce_loss(const Volume& p_class, const Volume& g) {
  require_prob_grid(p_class, "ce_loss");
  require_binary_mask(g, "ce_loss g");
  require_same_grid(p_class.geom(), g.geom(), "ce_loss");
  const float* p = p_class.f32().data();
  const std::uint8_t* gv = g.u8().data();
  const std::int64_t n = g.geom().voxel_count();
  const double total = chunked_sum(n, [&](std::int64_t i) {
    const double pi =
        std::clamp(static_cast<double>(p[i]), kCeClamp, 1.0 - kCeClamp);
    return gv[i] ? std::log(pi) : std::log(1.0 - pi);
  });
  return -total / static_cast<double>(n);
}

Volume default_gul_weights(const Volume& g) {
  require_binary_mask(g, "default_gul_weights");
  const SkeletonTree tree = skeletonize(g);
  Volume sites = Volume::label8(g.geom());
  auto sv = sites.u8();
  for (const SkeletonBranch& br : tree.branches)
    for (const Index3& v : br.voxels)
      sv[static_cast<std::size_t>(g.geom().index(v))] = 1;
  const std::vector<double> d2 = squared_distance_to_sites(
      g.geom(), sites.u8().data(), /*spacing_aware=*/false);
  Volume w = Volume::real32(g.geom(), 1.0f);
  auto wv = w.f32();
  const auto gv = g.u8();
  parallel_chunks(g.geom().voxel_count(), [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t i = b; i < e; ++i)
      if (gv[static_cast<std::size_t>(i)])
        wv[static_cast<std::size_t>(i)] = static_cast<float>(
            1.0 / (std::sqrt(d2[static_cast<std::size_t>(i)]) + 1.0));
  });
  return w;
}

double gul_loss(const ProbVolume& p, const Volume& g, const Volume* weights,
                double alpha, double r) {
  p.validate();
  require_binary_mask(g, "gul_loss g");
  require_same_grid(p.geom(), g.geom(), "gul_loss");
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw DataError("gul_loss: alpha must be in [0, 1]");
  if (!(r > 0.0 && r <= 1.0))
    throw DataError("gul_loss: r must be in (0, 1]");

  Volume derived;
  if (!weights) {
    derived = default_gul_weights(g);
    weights = &derived;
  }
  require_prob_grid(*weights, "gul_loss weights");
  require_same_grid(g.geom(), weights->geom(), "gul_loss weights");

  const std::int64_t n = g.geom().voxel_count();
  const float* wv = weights->f32().data();
  const std::uint8_t* gv = g.u8().data();
  std::vector<const float*> fg_grids;
  for (int c = 1; c < p.k(); ++c)
    fg_grids.push_back(p.class_probs[static_cast<std::size_t>(c)].f32().data());

  bool any_weight = false;
  for (std::int64_t i = 0; i < n; ++i) {
    if (wv[i] < 0.0f)
      throw DataError("gul_loss: weights must be non-negative");
    any_weight = any_weight || wv[i] > 0.0f;
  }
  if (!any_weight) throw DataError("gul_loss: all-zero weights");

  auto fg_prob = [&](std::int64_t i) {
    double s = 0.0;
    for (const float* gr : fg_grids) s += gr[i];
    return std::clamp(s, 0.0, 1.0);
  };
  const double num = chunked_sum(n, [&](std::int64_t i) {
    return gv[i] ? wv[i] * std::pow(fg_prob(i), r) : 0.0;
  });
  const double den = chunked_sum(n, [&](std::int64_t i) {
    return wv[i] * (alpha * fg_prob(i) + (1.0 - alpha) * (gv[i] ? 1.0 : 0.0));
  });
  if (den <= 0.0) return 0.0;
  return 1.0 - num / den;
}

double amc_loss(const ProbVolume& p, const AmcLabel& amc) {
  p.validate();
  if (p.k() != 4)
    throw DataError("amc_loss: expected 4 classes (background + L/M/S)");
  require_same_grid(p.geom(), amc.volume.geom(), "amc_loss");
  const auto av = amc.volume.u8();
  double total = 0.0;
  for (std::uint8_t cls : {kAmcLarge, kAmcMedium, kAmcSmall}) {
    Volume support = Volume::label8(amc.volume.geom());
    auto sv = support.u8();
    for (std::int64_t i = 0; i < amc.volume.geom().voxel_count(); ++i)
      sv[static_cast<std::size_t>(i)] = av[static_cast<std::size_t>(i)] == cls;
    total += dice_loss(p.class_probs[cls], support) +
             ce_loss(p.class_probs[cls], support);
  }
  return total;
}

double total_loss(const ProbVolume& p, const AmcLabel& amc, double lambda,
                  double alpha, double r) {
  if (lambda < 0.0) throw DataError("total_loss: lambda must be >= 0");
  const double amc_term = amc_loss(p, amc);
  if (lambda == 0.0) return amc_term;
  const Volume union_mask = amc_to_binary(amc);
  return amc_term + lambda * gul_loss(p, union_mask, nullptr, alpha, r);
}

}  // namespace airtopo
