#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "airtopo/skeleton.hpp"
#include "airtopo/volume.hpp"

namespace airtopo {

struct PerBranchRow {
  std::int32_t branch_id = 0;
  int generation = 0;
  double covered_fraction = 0.0;  // centerline voxels of the branch in pred
  bool detected = false;
};

// Metrics that cannot be formed (e.g. precision of an empty prediction) stay
// unset; they are emitted as nulls and skipped by aggregation, never as 0.
struct EvalReport {
  std::optional<double> bd_pct, tld_pct, precision_pct, dsc_pct,
      sensitivity_pct, specificity_pct;
  std::int64_t n_branches_ref = 0;
  std::int64_t n_branches_detected = 0;
  double total_length_mm = 0.0;
  double detected_length_mm = 0.0;
  std::vector<PerBranchRow> per_branch;
  double branch_detect_threshold = 0.8;
};

// Branch/length metrics follow ref's own centerline: TLD is the covered
// fraction of total centerline length, BD the fraction of branches whose
// covered centerline-voxel fraction reaches the threshold. Voxel metrics
// (precision/DSC/sensitivity) count overlaps; specificity is grid-wide.
EvalReport evaluate(const Volume& pred, const Volume& ref,
                    const SkeletonTree* ref_tree = nullptr,
                    double branch_detect_threshold = 0.8);

struct MetricAggregate {
  std::optional<double> mean, stddev;  // sample std; 0 when n == 1
  int n = 0;                           // cases where the metric was defined
};

struct CorpusReport {
  MetricAggregate bd, tld, precision, dsc, sensitivity, specificity;
  std::vector<EvalReport> cases;
};

struct EvalCase {
  const Volume* pred = nullptr;
  const Volume* ref = nullptr;
  const SkeletonTree* ref_tree = nullptr;  // skeletonized from ref if null
};

CorpusReport evaluate_corpus(const std::vector<EvalCase>& cases,
                             double branch_detect_threshold = 0.8);
CorpusReport aggregate_reports(std::vector<EvalReport> case_reports);

nlohmann::json eval_report_json(const EvalReport& r);
nlohmann::json corpus_report_json(const CorpusReport& r);

// One row per case, fixed header:
// case,bd_pct,tld_pct,precision_pct,dsc_pct,sensitivity_pct,specificity_pct,
// n_branches_ref,n_branches_detected,total_length_mm,detected_length_mm,
// branch_detect_threshold
// Undefined metrics are left as empty fields.
std::string corpus_report_csv(const CorpusReport& r);

}  // namespace airtopo
