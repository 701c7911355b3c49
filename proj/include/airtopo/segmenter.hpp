#pragma once

#include <array>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "airtopo/losses.hpp"
#include "airtopo/volume.hpp"

namespace airtopo {

// One training example. The label grid is label8 and may be either a plain
// binary mask (decomposed into the four airway classes internally) or an
// already-decomposed {0..3} class volume.
struct TrainingCase {
  const Volume* ct = nullptr;
  const Volume* label = nullptr;
};

// Serialized model state. `model` is self-describing JSON owned by the
// segmenter implementation; `id` is a content hash, stable across runs and
// thread counts, so identical training data always yields the same id.
struct SegmenterSnapshot {
  std::string id;
  nlohmann::json model;
};

// Seam for trainable voxel classifiers. train() fits from the cases and,
// when a model is already present, blends the fresh fit into it (warm
// start); on error the current model must remain untouched. predict()
// must be a pure function of (current model, input).
class SegmenterInterface {
 public:
  virtual ~SegmenterInterface() = default;
  virtual SegmenterSnapshot train(const std::vector<TrainingCase>& cases) = 0;
  virtual void load(const SegmenterSnapshot& snapshot) = 0;
  virtual ProbVolume predict(const Volume& ct) const = 0;
  virtual bool has_model() const = 0;
};

inline constexpr int kSegFeatureCount = 3;  // raw HU, 3^3 mean HU, |gradient|
inline constexpr int kSegClassCount = 4;

// Generative per-voxel classifier: one diagonal Gaussian per class over the
// three features above, priors from class frequency. Warm start blends old
// and new statistics with an exponential moving average (factor 0.5).
class ClassicalSegmenter : public SegmenterInterface {
 public:
  explicit ClassicalSegmenter(std::array<int, 2> cutoffs = {1, 3});

  SegmenterSnapshot train(const std::vector<TrainingCase>& cases) override;
  void load(const SegmenterSnapshot& snapshot) override;
  ProbVolume predict(const Volume& ct) const override;
  bool has_model() const override { return fitted_; }

  SegmenterSnapshot snapshot() const;

 private:
  struct FeatStats {
    double mean = 0.0;
    double var = 1.0;
  };
  struct ClassStats {
    double prior = 0.0;
    std::int64_t count = 0;
    std::array<FeatStats, kSegFeatureCount> feat{};
  };

  std::array<int, 2> cutoffs_;
  std::array<ClassStats, kSegClassCount> classes_{};
  bool fitted_ = false;
};

// Per-voxel feature rows for a CT grid, in voxel index order.
std::vector<std::array<double, kSegFeatureCount>> segmenter_features(
    const Volume& ct);

// Foreground probability = sum of non-background class posteriors;
// threshold, then keep the largest 26-connected component.
Volume binarize_prediction(const ProbVolume& p, double threshold = 0.5);

}  // namespace airtopo
