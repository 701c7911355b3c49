#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "airtopo/breakage.hpp"
#include "airtopo/metrics.hpp"
#include "airtopo/segmenter.hpp"
#include "airtopo/volume.hpp"

namespace airtopo {

// One subject in a self-learning run. `label` is the (possibly incomplete)
// reference the segmenter starts from and refinement fuses with.
// `ground_truth` is optional: when present (phantom experiments), iteration
// reports score pseudo-labels against it; otherwise against `label`.
// `gt_tree` must be the skeleton of whichever reference is scored against.
struct SelfLearningCase {
  std::string name;
  const Volume* ct = nullptr;
  const Volume* label = nullptr;
  const Volume* ground_truth = nullptr;
  const SkeletonTree* gt_tree = nullptr;
};

struct IterationRecord {
  int iter_index = 1;  // 1-based
  std::string snapshot_id;
  bool selected = false;
  std::vector<Volume> pseudo_labels;  // one per case, single-component binary
  CorpusReport report;                // pseudo-labels vs reference
};

struct SelfLearningResult {
  std::vector<SegmenterSnapshot> snapshots;  // parallel to iterations
  std::vector<IterationRecord> iterations;
  int select_iter = 0;
  // Set when a later training round failed; everything up to the last good
  // iteration is retained.
  bool aborted = false;
  std::string abort_reason;
};

// Iterative self-learning: train (fresh on the original labels, then
// warm-started on the previous round's pseudo-labels), predict, refine the
// prediction against the original label, repeat. The snapshot of iteration
// `select_iter` is flagged as the one to deploy.
SelfLearningResult iterate_self_learning(
    const std::vector<SelfLearningCase>& cases, SegmenterInterface& segmenter,
    const Connector& connector, int max_iters = 5, int select_iter = 3,
    double gamma_mm = 5.0, double binarize_threshold = 0.5,
    double branch_detect_threshold = 0.8);

// Deploy path: predict, binarize (threshold then largest component), fill
// detected breakages with the connector, and keep the largest component.
Volume run_inference(const Volume& ct, const SegmenterInterface& segmenter,
                     const Connector& connector, double gamma_mm = 5.0,
                     double threshold = 0.5);

// Deletes the mask voxels of ceil(fraction * n_leaves) randomly chosen leaf
// branches (each voxel goes with its nearest centerline branch). Stand-in
// for incompletely annotated references in self-learning experiments.
Volume delete_leaf_branches(const Volume& mask, const SkeletonTree& tree,
                            double fraction, std::uint64_t seed);

// Key-value run configuration ("key = value" lines, '#' comments). Unknown
// keys are rejected so typos fail fast; every value is kept as raw text.
std::map<std::string, std::string> parse_run_config(
    const std::string& text, const std::vector<std::string>& known_keys);

nlohmann::json self_learning_manifest_json(const SelfLearningResult& result,
                                           const std::vector<std::string>& case_names);

}  // namespace airtopo
