#pragma once

#include <cstdint>
#include <vector>

#include "airtopo/volume.hpp"

namespace airtopo {

// Connected-component labeling of a binary mask. Component IDs are assigned
// in first-encounter raster order starting at 1; 0 is background.
struct ComponentLabeling {
  VolumeGeometry geom;
  std::vector<std::int32_t> labels;       // per voxel, 0 = background
  std::int32_t count = 0;                 // number of components
  std::vector<std::int64_t> sizes;        // sizes[id-1] = voxel count
  std::vector<std::int32_t> by_size_desc; // ids sorted by (size desc, id asc)

  std::int32_t largest_id() const { return count > 0 ? by_size_desc[0] : 0; }
};

ComponentLabeling connected_components(const Volume& mask, int adjacency = 26);

// Binary mask holding only the largest 26-connected component. Empty input
// yields an empty mask and sets *was_empty when provided.
Volume largest_component(const Volume& mask, bool* was_empty = nullptr);

// The 26- or 6-neighborhood offset table, raster-ordered.
const std::vector<Index3>& neighbor_offsets(int adjacency);

}  // namespace airtopo
