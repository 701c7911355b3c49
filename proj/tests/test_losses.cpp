#include <doctest.h>

#include <cmath>
#include <random>

#include "airtopo/distance.hpp"
#include "airtopo/error.hpp"
#include "airtopo/losses.hpp"
#include "airtopo/phantom.hpp"
#include "airtopo/skeleton.hpp"

using namespace airtopo;

namespace {

VolumeGeometry tiny_geom() {
  VolumeGeometry g;
  g.dims = {6, 6, 6};
  g.spacing = {1.0, 1.0, 1.0};
  return g;
}

struct RandomCase {
  ProbVolume p;  // 2 classes
  Volume g;
  Volume w;
};

RandomCase random_case(std::mt19937& rng) {
  const VolumeGeometry geom = tiny_geom();
  RandomCase rc{{}, Volume::label8(geom), Volume::real32(geom)};
  rc.p.class_probs.push_back(Volume::real32(geom));
  rc.p.class_probs.push_back(Volume::real32(geom));
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  auto bg = rc.p.class_probs[0].f32();
  auto fg = rc.p.class_probs[1].f32();
  auto gv = rc.g.u8();
  auto wv = rc.w.f32();
  for (std::int64_t i = 0; i < geom.voxel_count(); ++i) {
    const float f = static_cast<float>(uni(rng));
    fg[i] = f;
    bg[i] = 1.0f - f;
    gv[i] = uni(rng) < 0.4 ? 1 : 0;
    wv[i] = static_cast<float>(uni(rng) + 0.01);
  }
  return rc;
}

double oracle_dice(const Volume& p, const Volume& g) {
  auto pv = p.f32();
  auto gv = g.u8();
  double inter = 0, sp = 0, sg = 0;
  for (std::int64_t i = 0; i < g.geom().voxel_count(); ++i) {
    inter += gv[i] ? pv[i] : 0.0;
    sp += pv[i];
    sg += gv[i];
  }
  return 1.0 - (2.0 * inter + 1e-5) / (sp + sg + 1e-5);
}

double oracle_ce(const Volume& p, const Volume& g) {
  auto pv = p.f32();
  auto gv = g.u8();
  double acc = 0;
  const std::int64_t n = g.geom().voxel_count();
  for (std::int64_t i = 0; i < n; ++i) {
    const double pi = std::clamp(static_cast<double>(pv[i]), 1e-7, 1.0 - 1e-7);
    acc += gv[i] ? std::log(pi) : std::log(1.0 - pi);
  }
  return -acc / static_cast<double>(n);
}

double oracle_gul(const ProbVolume& p, const Volume& g, const Volume& w,
                  double alpha, double r) {
  auto gv = g.u8();
  auto wv = w.f32();
  double num = 0, den = 0;
  for (std::int64_t i = 0; i < g.geom().voxel_count(); ++i) {
    double fg = 0;
    for (int c = 1; c < p.k(); ++c) fg += p.class_probs[c].f32()[i];
    fg = std::clamp(fg, 0.0, 1.0);
    num += gv[i] ? wv[i] * std::pow(fg, r) : 0.0;
    den += wv[i] * (alpha * fg + (1.0 - alpha) * (gv[i] ? 1.0 : 0.0));
  }
  return 1.0 - num / den;
}

}  // namespace

TEST_CASE("perfect one-hot predictions score near zero") {
  const VolumeGeometry geom = tiny_geom();
  Volume g = Volume::label8(geom);
  auto gv = g.u8();
  for (std::int64_t i = 0; i < geom.voxel_count(); i += 3) gv[i] = 1;
  const ProbVolume p = ProbVolume::from_binary(g);
  p.validate();
  CHECK(dice_loss(p.class_probs[1], g) < 1e-4);
  CHECK(ce_loss(p.class_probs[1], g) < 1e-5);
  CHECK(std::abs(gul_loss(p, g)) < 1e-12);

  // Total miss: predict the complement.
  CHECK(dice_loss(p.class_probs[0], g) > 0.999);
}

TEST_CASE("losses match scalar-loop oracles on random grids") {
  std::mt19937 rng(7101);
  for (int trial = 0; trial < 12; ++trial) {
    const RandomCase rc = random_case(rng);
    rc.p.validate();
    CHECK(dice_loss(rc.p.class_probs[1], rc.g) ==
          doctest::Approx(oracle_dice(rc.p.class_probs[1], rc.g))
              .epsilon(1e-6));
    CHECK(ce_loss(rc.p.class_probs[1], rc.g) ==
          doctest::Approx(oracle_ce(rc.p.class_probs[1], rc.g)).epsilon(1e-6));
    CHECK(gul_loss(rc.p, rc.g, &rc.w) ==
          doctest::Approx(oracle_gul(rc.p, rc.g, rc.w, 0.3, 0.7))
              .epsilon(1e-6));
    CHECK(gul_loss(rc.p, rc.g, &rc.w, 0.5, 1.0) ==
          doctest::Approx(oracle_gul(rc.p, rc.g, rc.w, 0.5, 1.0))
              .epsilon(1e-6));
  }
}

TEST_CASE("union loss extremes") {
  const VolumeGeometry geom = tiny_geom();
  Volume g = Volume::label8(geom);
  auto gv = g.u8();
  for (std::int64_t i = 0; i < 40; ++i) gv[i] = 1;

  ProbVolume zero;
  zero.class_probs.push_back(Volume::real32(geom, 1.0f));
  zero.class_probs.push_back(Volume::real32(geom, 0.0f));
  const Volume w = Volume::real32(geom, 1.0f);
  CHECK(gul_loss(zero, g, &w) == 1.0);

  // Parameter and weight validation.
  CHECK_THROWS_AS(gul_loss(zero, g, &w, -0.1, 0.7), DataError);
  CHECK_THROWS_AS(gul_loss(zero, g, &w, 0.3, 0.0), DataError);
  const Volume wz = Volume::real32(geom, 0.0f);
  CHECK_THROWS_AS(gul_loss(zero, g, &wz), DataError);
  Volume wneg = Volume::real32(geom, 1.0f);
  wneg.f32()[0] = -1.0f;
  CHECK_THROWS_AS(gul_loss(zero, g, &wneg), DataError);
}

TEST_CASE("default union weights follow inverse centerline distance") {
  VolumeGeometry geom;
  geom.dims = {24, 24, 24};
  geom.spacing = {0.7, 0.7, 0.7};
  Volume g = Volume::label8(geom);
  auto gv = g.u8();
  for (int z = 2; z < 22; ++z)
    for (int y = 10; y <= 14; ++y)
      for (int x = 10; x <= 14; ++x)
        if ((x - 12) * (x - 12) + (y - 12) * (y - 12) <= 4)
          gv[geom.index(x, y, z)] = 1;

  const Volume w = default_gul_weights(g);
  const SkeletonTree tree = skeletonize(g);
  std::vector<Index3> skel = tree.all_voxels();
  auto wv = w.f32();
  for (std::int64_t i = 0; i < geom.voxel_count(); ++i) {
    if (!gv[i]) {
      CHECK(wv[i] == 1.0f);
      continue;
    }
    const Index3 v = geom.unindex(i);
    double best = 1e30;
    for (const Index3& s : skel) {
      const double dx = v.x - s.x, dy = v.y - s.y, dz = v.z - s.z;
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    CHECK(wv[i] ==
          doctest::Approx(1.0 / (std::sqrt(best) + 1.0)).epsilon(1e-6));
  }
}

TEST_CASE("anatomy-class loss and total loss on a phantom") {
  PhantomSpec spec;
  spec.generations = 4;
  spec.dims = {96, 96, 96};
  spec.seed = 33;
  const Phantom ph = generate_phantom(spec);
  const AmcLabel amc = decompose_amc(ph.gt_mask, {1, 3}, &ph.gt_tree);

  // One-hot prediction straight from the label volume.
  ProbVolume p;
  for (int c = 0; c < 4; ++c)
    p.class_probs.push_back(Volume::real32(amc.volume.geom()));
  auto av = amc.volume.u8();
  for (std::int64_t i = 0; i < amc.volume.geom().voxel_count(); ++i)
    p.class_probs[av[i]].f32()[i] = 1.0f;
  p.validate();

  CHECK(amc_loss(p, amc) < 3e-4);
  CHECK(total_loss(p, amc) < 4e-4);

  // Affine in lambda.
  const double l0 = total_loss(p, amc, 0.0);
  CHECK(l0 == amc_loss(p, amc));
  const double l25 = total_loss(p, amc, 0.25);
  const double l50 = total_loss(p, amc, 0.5);
  CHECK(std::abs((l50 - l0) - 2.0 * (l25 - l0)) < 1e-9);

  ProbVolume two = ProbVolume::from_binary(ph.gt_mask);
  CHECK_THROWS_AS(amc_loss(two, amc), DataError);
}

TEST_CASE("probability volumes are validated") {
  const VolumeGeometry geom = tiny_geom();
  ProbVolume p;
  p.class_probs.push_back(Volume::real32(geom, 0.6f));
  CHECK_THROWS_AS(p.validate(), DataError);  // single class
  p.class_probs.push_back(Volume::real32(geom, 0.6f));
  CHECK_THROWS_AS(p.validate(), DataError);  // sums to 1.2
  p.class_probs[1] = Volume::real32(geom, 0.4f);
  p.validate();
}
