#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "airtopo/components.hpp"
#include "airtopo/volume.hpp"

namespace airtopo {

// Sentinel for "no site reachable"; large enough to dominate any real
// squared distance, small enough to survive additive passes.
inline constexpr double kDistInf = 1e30;

inline bool dist_defined(double sq) { return sq < kDistInf * 0.5; }

// Exact squared Euclidean distance to the nearest nonzero voxel of
// `site_mask`, one value per voxel, via the separable lower-envelope
// transform. Weights are spacing^2 per axis when spacing_aware.
std::vector<double> squared_distance_to_sites(const VolumeGeometry& g,
                                              const std::uint8_t* site_mask,
                                              bool spacing_aware);

// Exact EDT of a binary mask: distance (mm when spacing_aware, voxels
// otherwise) from every voxel to the nearest foreground voxel.
// Errors on empty foreground.
Volume euclidean_distance_map(const Volume& mask, bool spacing_aware = true);

// Depth map: mm distance to the nearest background voxel for foreground
// voxels, 0 elsewhere. Background outside the grid is not considered.
std::vector<double> interior_distance_mm(const Volume& mask);

struct LabeledCandidate {
  double dist_sq = kDistInf;
  std::int32_t label = -1;
};

// Exact nearest labeled site per voxel. Exact distance ties resolve to the
// smaller label. Sites are (raster index, label) pairs.
std::vector<LabeledCandidate> nearest_labeled_site(
    const VolumeGeometry& g,
    const std::vector<std::pair<std::int64_t, std::int32_t>>& sites,
    bool spacing_aware);

struct SecondDistanceField {
  std::vector<double> first_sq;
  std::vector<double> second_sq;  // kDistInf where < 2 components reachable
  std::vector<std::int32_t> first_label;
  std::vector<std::int32_t> second_label;
};

// Nearest / second-nearest-distinct-component feature transform: for every
// voxel, the distance to its closest component and to the closest component
// other than that one. This is the fast path behind the breakage attention
// map; each separable pass carries the best two distinct-label candidates
// per cell, which is sufficient because candidates sharing a cell receive
// identical offsets in later passes.
SecondDistanceField second_component_distance(const ComponentLabeling& cl,
                                              bool spacing_aware = true);

// Binary morphology with a discrete Euclidean ball of radius_vox voxels.
Volume dilate(const Volume& mask, int radius_vox);
Volume erode(const Volume& mask, int radius_vox);

}  // namespace airtopo
