#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "airtopo/volume.hpp"

namespace airtopo {

struct SkeletonBranch {
  std::int32_t id = 0;      // 1-based, assigned in root-first parse order
  std::int32_t parent = 0;  // 0 = no parent (root branch)
  int generation = 0;       // root = 0, child = parent + 1
  std::vector<Index3> voxels;  // ordered 26-connected chain
  double length_mm = 0.0;      // sum of consecutive within-chain steps
  double mean_radius_mm = 0.0; // mean interior distance over the chain
};

// Rooted curve-skeleton tree. Junction voxels belong to the chain that
// reaches them first (the parent); child chains start on the far side.
struct SkeletonTree {
  VolumeGeometry geom;
  Index3 root{};
  std::int32_t root_branch_id = 0;
  double total_length_mm = 0.0;
  std::vector<SkeletonBranch> branches;  // branches[i].id == i + 1

  std::int64_t node_count() const;
  std::vector<Index3> all_voxels() const;
  const SkeletonBranch& branch(std::int32_t id) const;
  bool is_leaf(std::int32_t id) const;  // no branch lists this id as parent
};

// Minimum-cost-path skeletonization of the largest component of a binary
// mask. Interior depth shapes the step cost 1/(1 + d(v)^2) so paths run
// down the middle of tubes; endpoint candidates are geodesic-distance local
// maxima, visited farthest-first and suppressed within twice the local
// skeleton radius. Fully deterministic (raster-order tie-breaks).
SkeletonTree skeletonize(const Volume& mask,
                         const std::optional<Index3>& root_hint = std::nullopt);

// Decompose a 26-connected skeleton voxel set into maximal junction-free
// chains by walking from the root. interior_mm (optional, full-grid field)
// feeds per-branch mean radii.
SkeletonTree parse_branches(const VolumeGeometry& geom,
                            const std::vector<Index3>& skeleton_voxels,
                            const Index3& root,
                            const std::vector<double>* interior_mm = nullptr);

// Paint every foreground voxel of mask with the class of its nearest
// skeleton voxel (Euclidean mm; exact ties go to the smaller branch id).
// branch_class[id - 1] holds the class (small integers >= 1) per branch.
Volume propagate_labels(const SkeletonTree& tree,
                        const std::vector<std::uint8_t>& branch_class,
                        const Volume& mask);

// Covered centerline length per branch: a chain step counts when both of
// its endpoint voxels lie inside pred. Indexed by branch id - 1.
std::vector<double> skeleton_length_inside(const SkeletonTree& tree,
                                           const Volume& pred);

nlohmann::json skeleton_to_json(const SkeletonTree& tree);
SkeletonTree skeleton_from_json(const nlohmann::json& j);

}  // namespace airtopo
