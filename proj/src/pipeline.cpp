#include "airtopo/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "airtopo/distance.hpp"
#include "airtopo/error.hpp"
#include "airtopo/rng.hpp"

namespace airtopo {

namespace {

void validate_cases(const std::vector<SelfLearningCase>& cases) {
  if (cases.empty()) throw DataError("self-learning: no cases");
  for (const SelfLearningCase& c : cases) {
    if (c.ct == nullptr || c.label == nullptr)
      throw DataError("self-learning: case missing ct or label");
    require_binary_mask(*c.label, "self-learning label");
    require_same_grid(c.ct->geom(), c.label->geom(), "self-learning");
    if (c.ground_truth != nullptr) {
      require_binary_mask(*c.ground_truth, "self-learning ground truth");
      require_same_grid(c.ct->geom(), c.ground_truth->geom(),
                        "self-learning");
    }
  }
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

SelfLearningResult iterate_self_learning(
    const std::vector<SelfLearningCase>& cases, SegmenterInterface& segmenter,
    const Connector& connector, int max_iters, int select_iter,
    double gamma_mm, double binarize_threshold,
    double branch_detect_threshold) {
  validate_cases(cases);
  if (max_iters < 1) throw DataError("self-learning: max_iters must be >= 1");
  if (select_iter < 1 || select_iter > max_iters)
    throw DataError("self-learning: select_iter must be in [1, max_iters]");

  SelfLearningResult result;
  result.select_iter = select_iter;

  for (int n = 1; n <= max_iters; ++n) {
    std::vector<TrainingCase> train_cases;
    train_cases.reserve(cases.size());
    for (std::size_t i = 0; i < cases.size(); ++i) {
      const Volume* label =
          n == 1 ? cases[i].label
                 : &result.iterations.back().pseudo_labels[i];
      train_cases.push_back({cases[i].ct, label});
    }

    SegmenterSnapshot snap;
    try {
      snap = segmenter.train(train_cases);
    } catch (const std::exception& e) {
      result.aborted = true;
      result.abort_reason = "training failed at iteration " +
                            std::to_string(n) + ": " + e.what();
      break;
    }

    IterationRecord rec;
    rec.iter_index = n;
    rec.snapshot_id = snap.id;
    rec.selected = n == select_iter;
    rec.pseudo_labels.reserve(cases.size());
    for (const SelfLearningCase& c : cases) {
      const Volume pred =
          binarize_prediction(segmenter.predict(*c.ct), binarize_threshold);
      rec.pseudo_labels.push_back(
          refine_pseudo_label(pred, *c.label, *c.ct, connector, gamma_mm));
    }

    std::vector<EvalCase> evals;
    evals.reserve(cases.size());
    for (std::size_t i = 0; i < cases.size(); ++i) {
      const Volume* ref =
          cases[i].ground_truth ? cases[i].ground_truth : cases[i].label;
      evals.push_back({&rec.pseudo_labels[i], ref, cases[i].gt_tree});
    }
    rec.report = evaluate_corpus(evals, branch_detect_threshold);

    result.snapshots.push_back(std::move(snap));
    result.iterations.push_back(std::move(rec));
  }
  return result;
}

Volume run_inference(const Volume& ct, const SegmenterInterface& segmenter,
                     const Connector& connector, double gamma_mm,
                     double threshold) {
  const Volume pred = binarize_prediction(segmenter.predict(ct), threshold);
  if (foreground_count(pred) == 0) return pred;
  return reconnect_mask(pred, ct, connector, gamma_mm);
}

Volume delete_leaf_branches(const Volume& mask, const SkeletonTree& tree,
                            double fraction, std::uint64_t seed) {
  require_binary_mask(mask, "delete_leaf_branches");
  require_same_grid(mask.geom(), tree.geom, "delete_leaf_branches");
  if (!(fraction >= 0.0 && fraction <= 1.0))
    throw DataError("delete_leaf_branches: fraction must be in [0,1]");

  std::vector<std::int32_t> leaves;
  for (const SkeletonBranch& b : tree.branches)
    if (tree.is_leaf(b.id)) leaves.push_back(b.id);
  std::sort(leaves.begin(), leaves.end());
  const auto k = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(leaves.size())));

  Volume out = Volume::label8(mask.geom());
  std::copy(mask.u8().begin(), mask.u8().end(), out.u8().begin());
  if (k == 0) return out;

  Rng rng(seed);
  const auto picks = rng.sample_without_replacement<std::size_t>(
      leaves.size(), std::min(k, leaves.size()));
  std::vector<char> doomed(tree.branches.size() + 1, 0);
  for (const std::size_t p : picks)
    doomed[static_cast<std::size_t>(leaves[p])] = 1;

  std::vector<std::pair<std::int64_t, std::int32_t>> sites;
  for (const SkeletonBranch& b : tree.branches)
    for (const Index3& v : b.voxels)
      sites.emplace_back(mask.geom().index(v), b.id);
  const std::vector<LabeledCandidate> owner =
      nearest_labeled_site(mask.geom(), sites, true);

  auto mv = out.u8();
  for (std::int64_t i = 0; i < mask.geom().voxel_count(); ++i)
    if (mv[i] && owner[static_cast<std::size_t>(i)].label > 0 &&
        doomed[static_cast<std::size_t>(
            owner[static_cast<std::size_t>(i)].label)])
      mv[i] = 0;
  return out;
}

std::map<std::string, std::string> parse_run_config(
    const std::string& text, const std::vector<std::string>& known_keys) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw DataError("run config line " + std::to_string(lineno) +
                      ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw DataError("run config line " + std::to_string(lineno) +
                      ": empty key");
    if (std::find(known_keys.begin(), known_keys.end(), key) ==
        known_keys.end())
      throw DataError("run config line " + std::to_string(lineno) +
                      ": unknown key '" + key + "'");
    if (!out.emplace(key, value).second)
      throw DataError("run config line " + std::to_string(lineno) +
                      ": duplicate key '" + key + "'");
  }
  return out;
}

nlohmann::json self_learning_manifest_json(
    const SelfLearningResult& result,
    const std::vector<std::string>& case_names) {
  nlohmann::json iters = nlohmann::json::array();
  for (const IterationRecord& rec : result.iterations) {
    iters.push_back({{"iter", rec.iter_index},
                     {"snapshot_id", rec.snapshot_id},
                     {"selected", rec.selected},
                     {"report", corpus_report_json(rec.report)}});
  }
  nlohmann::json j{{"schema_version", 1},
                   {"select_iter", result.select_iter},
                   {"aborted", result.aborted},
                   {"cases", case_names},
                   {"iterations", iters}};
  if (result.aborted) j["abort_reason"] = result.abort_reason;
  return j;
}

}  // namespace airtopo
