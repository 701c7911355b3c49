#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "airtopo/skeleton.hpp"
#include "airtopo/volume.hpp"

namespace airtopo {

// Voxels where fewer than two components exist get this raw value; the
// normalized map is ~0 there.
inline constexpr float kAttentionSentinel = 1e9f;

struct AttentionMap {
  Volume raw;         // real32, mm: distance to the second-nearest component
  Volume normalized;  // real32 in (0,1): 1 / (1 + exp(raw - gamma))
  double gamma_mm = 5.0;
  std::vector<Index3> breakage_centers;  // local maxima >= 0.5, NMS radius gamma
};

AttentionMap breakage_attention(const Volume& mask, double gamma_mm = 5.0);

struct BreakageSample {
  Volume broken_mask;  // mask with peripheral segments carved out
  Volume breakage_gt;  // the carved-out voxels
  std::vector<std::pair<std::int32_t, double>> removed_branches;  // (id, fraction)
  std::uint64_t seed = 0;
  double branch_fraction = 0.0;
  std::pair<double, double> removal_range{0.0, 0.0};
};

// Removes an interior sub-segment from ceil(branch_fraction * n_leaves)
// peripheral branches; the per-branch removed fraction is uniform in
// removal_range. A precomputed tree for the mask may be supplied.
BreakageSample simulate_breakage(const Volume& mask, double branch_fraction,
                                 std::pair<double, double> removal_range,
                                 std::uint64_t seed,
                                 const SkeletonTree* tree = nullptr);

nlohmann::json breakage_manifest_json(const BreakageSample& sample);

inline constexpr int kPatchEdge = 64;

struct ConnectorPatchRequest {
  Volume ct_patch;     // hu16, kPatchEdge^3, padded with -1024
  Volume attn_patch;   // real32 normalized attention, padded with 0
  Volume label_patch;  // label8 binary, padded with 0
  Index3 patch_origin;  // parent-grid voxel of patch (0,0,0); may be negative
};

// One patch per breakage center, jittered by a uniform integer offset in
// [-jitter_vox, +jitter_vox] per axis.
std::vector<ConnectorPatchRequest> sample_patches(const AttentionMap& attention,
                                                  const Volume& ct,
                                                  const Volume& label,
                                                  int jitter_vox,
                                                  std::uint64_t seed);

// Seam for pluggable gap-filling models; connect() returns a patch-local
// binary fill volume (voxels to add, disjoint from the input label).
class Connector {
 public:
  virtual ~Connector() = default;
  virtual Volume connect(const ConnectorPatchRequest& request) const = 0;
};

// Shortest-path tube connector: joins the two mutually closest components
// in the patch along a minimum-cost path that prefers air-like HU and high
// attention, then inflates it to the thinner endpoint's radius.
Volume connect_geometric(const ConnectorPatchRequest& request);

class GeometricConnector : public Connector {
 public:
  Volume connect(const ConnectorPatchRequest& request) const override {
    return connect_geometric(request);
  }
};

// Fuse prediction and reference, detect likely breakages, fill gaps with
// the connector, and keep the largest component of the result.
Volume refine_pseudo_label(const Volume& pred, const Volume& ref,
                           const Volume& ct, const Connector& connector,
                           double gamma_mm = 5.0);

// The refinement core on a single mask (no fusion): attention -> patches ->
// fills -> largest component. Exposed for inference post-processing.
Volume reconnect_mask(const Volume& mask, const Volume& ct,
                      const Connector& connector, double gamma_mm = 5.0);

}  // namespace airtopo
