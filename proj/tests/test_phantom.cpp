#include <doctest.h>

#include <cmath>
#include <cstring>

#include "airtopo/error.hpp"
#include "airtopo/phantom.hpp"

using namespace airtopo;

namespace {

bool same_payload(const Volume& a, const Volume& b) {
  return a.geom().same_grid(b.geom()) && a.kind() == b.kind() &&
         std::memcmp(a.raw_data(), b.raw_data(),
                     static_cast<std::size_t>(a.geom().voxel_count()) *
                         a.element_size()) == 0;
}

bool chains_adjacent(const SkeletonTree& t) {
  for (const auto& br : t.branches)
    for (std::size_t i = 1; i < br.voxels.size(); ++i) {
      const Index3& a = br.voxels[i - 1];
      const Index3& b = br.voxels[i];
      const int dx = std::abs(a.x - b.x), dy = std::abs(a.y - b.y),
                dz = std::abs(a.z - b.z);
      if ((dx | dy | dz) == 0 || dx > 1 || dy > 1 || dz > 1) return false;
    }
  return true;
}

}  // namespace

TEST_CASE("phantom generation is deterministic in the seed") {
  PhantomSpec spec;
  spec.generations = 5;
  spec.dims = {128, 128, 128};
  spec.seed = 42;
  const Phantom a = generate_phantom(spec);
  const Phantom b = generate_phantom(spec);
  CHECK(same_payload(a.ct, b.ct));
  CHECK(same_payload(a.gt_mask, b.gt_mask));
  CHECK(a.gt_tree.branches.size() == b.gt_tree.branches.size());
  CHECK(a.gt_tree.total_length_mm == doctest::Approx(b.gt_tree.total_length_mm));

  spec.seed = 43;
  const Phantom c = generate_phantom(spec);
  CHECK(!same_payload(a.ct, c.ct));
}

TEST_CASE("four generations make a full binary tree of 15 branches") {
  PhantomSpec spec;
  spec.generations = 4;
  spec.dims = {128, 128, 128};
  spec.seed = 7;
  const Phantom p = generate_phantom(spec);
  CHECK(p.generations_used == 4);
  CHECK(p.gt_tree.branches.size() == 15);
  int leaves = 0;
  for (const auto& br : p.gt_tree.branches) {
    CHECK(br.id >= 1);
    if (br.parent != 0) {
      CHECK(br.parent < br.id);
      CHECK(br.generation ==
            p.gt_tree.branch(br.parent).generation + 1);
    } else {
      CHECK(br.generation == 0);
    }
    if (p.gt_tree.is_leaf(br.id)) ++leaves;
  }
  CHECK(leaves == 8);
}

TEST_CASE("phantom tree chains are valid and inside the mask") {
  PhantomSpec spec;
  spec.seed = 11;
  const Phantom p = generate_phantom(spec);
  CHECK(p.generations_used == spec.generations);
  CHECK(chains_adjacent(p.gt_tree));
  CHECK(p.gt_tree.root == p.gt_tree.branches.front().voxels.front());
  auto m = p.gt_mask.u8();
  const auto& g = p.gt_mask.geom();
  for (const auto& br : p.gt_tree.branches)
    for (const Index3& v : br.voxels) {
      REQUIRE(g.contains(v));
      CHECK(m[g.index(v)] == 1);
    }
  // Peripheral branches must be long enough to carve segments from.
  for (const auto& br : p.gt_tree.branches)
    if (p.gt_tree.is_leaf(br.id) && br.id != p.gt_tree.root_branch_id)
      CHECK(br.voxels.size() >= 4);
}

TEST_CASE("phantom HU statistics look like lumen/wall/parenchyma") {
  PhantomSpec spec;
  spec.seed = 3;
  const Phantom p = generate_phantom(spec);
  auto ct = p.ct.i16();
  auto m = p.gt_mask.u8();
  const auto& g = p.gt_mask.geom();

  // Deep lumen stays air-like even after blur and noise.
  double lumen_sum = 0;
  std::int64_t lumen_n = 0;
  for (const auto& br : p.gt_tree.branches)
    if (br.generation <= 1)
      for (const Index3& v : br.voxels) {
        lumen_sum += ct[g.index(v)];
        ++lumen_n;
      }
  REQUIRE(lumen_n > 0);
  CHECK(lumen_sum / lumen_n < -800.0);

  // A background corner block is parenchyma with noise.
  double bg_sum = 0, bg_sq = 0;
  std::int64_t bg_n = 0;
  for (int z = 2; z < 12; ++z)
    for (int y = 2; y < 12; ++y)
      for (int x = 2; x < 12; ++x) {
        REQUIRE(m[g.index(x, y, z)] == 0);
        const double v = ct[g.index(x, y, z)];
        bg_sum += v;
        bg_sq += v * v;
        ++bg_n;
      }
  const double mean = bg_sum / bg_n;
  const double sd = std::sqrt(bg_sq / bg_n - mean * mean);
  CHECK(mean == doctest::Approx(-850.0).epsilon(0.02));
  CHECK(sd > 15.0);
  CHECK(sd < 60.0);
}

TEST_CASE("radius clamp shortens the tree and is reported") {
  PhantomSpec spec;
  spec.trunk_radius_mm = 1.0;
  spec.radius_decay = 0.5;
  spec.dims = {96, 96, 96};
  spec.generations = 5;
  spec.trunk_length_mm = 20.0;
  const Phantom p = generate_phantom(spec);
  CHECK(p.generations_used == 1);
  CHECK(p.gt_tree.branches.size() == 1);
}

TEST_CASE("phantom rejects invalid specs") {
  PhantomSpec spec;
  spec.generations = 0;
  CHECK_THROWS_AS(generate_phantom(spec), DataError);
  spec = PhantomSpec{};
  spec.radius_decay = 1.5;
  CHECK_THROWS_AS(generate_phantom(spec), DataError);
  spec = PhantomSpec{};
  spec.dims = {20, 20, 20};
  CHECK_THROWS_AS(generate_phantom(spec), DataError);
}
