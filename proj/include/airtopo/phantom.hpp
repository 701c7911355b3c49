#pragma once

#include <array>
#include <cstdint>

#include "airtopo/skeleton.hpp"
#include "airtopo/volume.hpp"

namespace airtopo {

// Synthetic airway-like CT phantom: a recursive binary tree of straight
// tubes (constant radius per branch) rendered as lumen / thin wall /
// parenchyma with partial-volume blur and Gaussian noise. Everything is
// driven by one seed; the exact centerline tree is returned alongside.
struct PhantomSpec {
  int generations = 6;            // trunk is generation 0
  double trunk_radius_mm = 4.0;
  double trunk_length_mm = 28.0;
  double radius_decay = 0.75;
  double length_decay = 0.8;
  double branch_angle_deg = 35.0;
  double angle_jitter_deg = 8.0;
  std::array<int, 3> dims{160, 160, 160};
  std::array<double, 3> spacing{0.7, 0.7, 0.7};
  double lumen_hu = -1000.0;
  double wall_hu = -50.0;
  double parenchyma_hu = -850.0;
  double noise_sigma_hu = 30.0;
  // Minimum surface-to-surface daylight between tubes that do not meet at a
  // junction. Larger values give sparser, easier-to-reconnect trees.
  double clearance_mm = 1.5;
  std::uint64_t seed = 0;
};

struct Phantom {
  Volume ct;       // hu16
  Volume gt_mask;  // label8 lumen mask
  SkeletonTree gt_tree;
  int generations_used = 0;  // < spec.generations when radii hit 1 voxel
};

Phantom generate_phantom(const PhantomSpec& spec);

}  // namespace airtopo
