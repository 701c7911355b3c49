#pragma once

#include <vector>

#include "airtopo/anatomy.hpp"
#include "airtopo/volume.hpp"

namespace airtopo {

// Per-class probability grids, background first. Every voxel's probabilities
// must lie in [0,1] and sum to 1 within 1e-5 (validate() enforces this).
struct ProbVolume {
  std::vector<Volume> class_probs;  // each real32 on a shared grid

  int k() const { return static_cast<int>(class_probs.size()); }
  const VolumeGeometry& geom() const;
  void validate() const;

  // One-hot two-class encoding of a binary mask (background, foreground).
  static ProbVolume from_binary(const Volume& mask);
};

inline constexpr double kDiceEpsilon = 1e-5;
inline constexpr double kCeClamp = 1e-7;

// Soft Dice loss of one class grid against its binary support:
// 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps).
double dice_loss(const Volume& p_class, const Volume& g);

// Mean binary cross entropy with probabilities clamped to
// [kCeClamp, 1 - kCeClamp].
double ce_loss(const Volume& p_class, const Volume& g);

// Inverse-centerline-distance weights for the union loss: inside g the
// weight is 1/(d+1) with d the voxel distance to g's centerline; outside
// it is 1. g must be nonempty.
Volume default_gul_weights(const Volume& g);

// Root-Tversky union loss on the foreground probability (sum of the
// non-background classes): 1 - sum(w*p^r*g) / sum(w*(alpha*p + (1-alpha)*g)).
// weights == nullptr derives default_gul_weights(g). A zero denominator
// (empty g and empty p) scores 0. Errors on all-zero weights.
double gul_loss(const ProbVolume& p, const Volume& g,
                const Volume* weights = nullptr, double alpha = 0.3,
                double r = 0.7);

// Sum over the three foreground classes of dice_loss + ce_loss against the
// class supports of amc. Requires a 4-class probability volume.
double amc_loss(const ProbVolume& p, const AmcLabel& amc);

// amc_loss + lambda * gul_loss on the binary union of the AMC classes with
// default weights.
double total_loss(const ProbVolume& p, const AmcLabel& amc,
                  double lambda = 0.25, double alpha = 0.3, double r = 0.7);

}  // namespace airtopo
