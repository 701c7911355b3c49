#include <doctest.h>

#include <nlohmann/json.hpp>

#include "airtopo/anatomy.hpp"
#include "airtopo/error.hpp"
#include "airtopo/phantom.hpp"

using namespace airtopo;

TEST_CASE("branch classes follow generation cutoffs") {
  SkeletonTree t;
  t.geom.dims = {4, 4, 8};
  t.geom.spacing = {1, 1, 1};
  t.geom.origin = {0, 0, 0};
  for (int gen = 0; gen < 6; ++gen) {
    SkeletonBranch br;
    br.id = gen + 1;
    br.parent = gen;
    br.generation = gen;
    br.voxels = {{0, 0, gen}};
    t.branches.push_back(br);
  }
  t.root = {0, 0, 0};
  t.root_branch_id = 1;

  const auto def = amc_branch_classes(t, {1, 3});
  CHECK(def == std::vector<std::uint8_t>{1, 1, 2, 2, 3, 3});
  const auto tight = amc_branch_classes(t, {0, 0});
  CHECK(tight == std::vector<std::uint8_t>{1, 3, 3, 3, 3, 3});
  CHECK_THROWS_AS(amc_branch_classes(t, {2, 1}), DataError);
  CHECK_THROWS_AS(amc_branch_classes(t, {-1, 3}), DataError);
}

TEST_CASE("decompose_amc partitions a phantom mask into L/M/S") {
  PhantomSpec spec;
  spec.generations = 5;
  spec.dims = {128, 128, 128};
  spec.seed = 21;
  const Phantom p = generate_phantom(spec);

  bool multi = true;
  const AmcLabel amc = decompose_amc(p.gt_mask, {1, 3}, &p.gt_tree, &multi);
  CHECK(!multi);
  CHECK(amc.generation_cutoffs == std::array<int, 2>{1, 3});

  auto lab = amc.volume.u8();
  auto m = p.gt_mask.u8();
  std::array<std::int64_t, 4> counts{};
  for (std::int64_t i = 0; i < p.gt_mask.geom().voxel_count(); ++i) {
    REQUIRE(lab[i] <= 3);
    if (m[i])
      REQUIRE(lab[i] >= 1);
    else
      REQUIRE(lab[i] == 0);
    ++counts[lab[i]];
  }
  // Generations 0..4 with cutoffs (1,3): every class is populated.
  CHECK(counts[1] > 0);
  CHECK(counts[2] > 0);
  CHECK(counts[3] > 0);

  const Volume back = amc_to_binary(amc);
  auto bv = back.u8();
  for (std::int64_t i = 0; i < p.gt_mask.geom().voxel_count(); ++i)
    REQUIRE(bv[i] == m[i]);
}

TEST_CASE("single-branch mask is all large") {
  VolumeGeometry g;
  g.dims = {13, 13, 40};
  g.spacing = {1, 1, 1};
  g.origin = {0, 0, 0};
  Volume m = Volume::label8(g);
  auto v = m.u8();
  for (int z = 4; z < 36; ++z)
    for (int y = 4; y <= 8; ++y)
      for (int x = 4; x <= 8; ++x)
        if ((x - 6) * (x - 6) + (y - 6) * (y - 6) <= 4) v[g.index(x, y, z)] = 1;
  const AmcLabel amc = decompose_amc(m);
  auto lab = amc.volume.u8();
  for (std::int64_t i = 0; i < g.voxel_count(); ++i)
    REQUIRE(lab[i] == (v[i] ? kAmcLarge : kAmcBackground));
}

TEST_CASE("stray components are flagged but still labeled") {
  VolumeGeometry g;
  g.dims = {13, 13, 40};
  g.spacing = {1, 1, 1};
  g.origin = {0, 0, 0};
  Volume m = Volume::label8(g);
  auto v = m.u8();
  for (int z = 4; z < 30; ++z) v[g.index(6, 6, z)] = 1;
  v[g.index(2, 2, 36)] = 1;  // disconnected speck
  bool multi = false;
  const AmcLabel amc = decompose_amc(m, {1, 3}, nullptr, &multi);
  CHECK(multi);
  CHECK(amc.volume.u8()[g.index(2, 2, 36)] == kAmcLarge);
}

TEST_CASE("amc sidecar records the class map") {
  AmcLabel amc;
  amc.generation_cutoffs = {2, 4};
  const nlohmann::json j = amc_sidecar_json(amc);
  CHECK(j["class_map"]["1"] == "L");
  CHECK(j["class_map"]["2"] == "M");
  CHECK(j["class_map"]["3"] == "S");
  CHECK(j["generation_cutoffs"][0] == 2);
  CHECK(j["generation_cutoffs"][1] == 4);
}
