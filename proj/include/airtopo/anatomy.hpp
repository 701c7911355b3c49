#pragma once

#include <array>

#include <nlohmann/json_fwd.hpp>

#include "airtopo/skeleton.hpp"
#include "airtopo/volume.hpp"

namespace airtopo {

// Anatomy-aware multi-class labeling: 0 background, 1 large (trachea and
// main bronchi), 2 medium (lobar through segmental), 3 small (the rest).
// Classes are assigned per skeleton branch by generation depth and then
// propagated back to every mask voxel, so they always partition the mask.
struct AmcLabel {
  Volume volume;  // label8 with values in {0,1,2,3}
  std::array<int, 2> generation_cutoffs{1, 3};  // (g_LM, g_MS)
};

inline constexpr std::uint8_t kAmcBackground = 0;
inline constexpr std::uint8_t kAmcLarge = 1;
inline constexpr std::uint8_t kAmcMedium = 2;
inline constexpr std::uint8_t kAmcSmall = 3;
const char* amc_class_name(std::uint8_t value);

// Decompose a binary mask. A precomputed skeleton tree of the mask can be
// passed to skip re-skeletonization; multi_component (optional out) reports
// whether the mask had more than one component (the skeleton covers only
// the largest, but propagation still labels every mask voxel).
AmcLabel decompose_amc(const Volume& mask,
                       std::array<int, 2> cutoffs = {1, 3},
                       const SkeletonTree* tree = nullptr,
                       bool* multi_component = nullptr);

// Per-branch class values (1/2/3) for a tree under the given cutoffs.
std::vector<std::uint8_t> amc_branch_classes(const SkeletonTree& tree,
                                             std::array<int, 2> cutoffs);

Volume amc_to_binary(const AmcLabel& label);

// Sidecar metadata: {class_map, generation_cutoffs}.
nlohmann::json amc_sidecar_json(const AmcLabel& label);

}  // namespace airtopo
