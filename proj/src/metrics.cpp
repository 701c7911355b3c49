#include "airtopo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "airtopo/error.hpp"
#include "airtopo/parallel.hpp"

namespace airtopo {

namespace {

struct OverlapCounts {
  std::int64_t tp = 0, n_pred = 0, n_ref = 0, tn = 0;
};

OverlapCounts count_overlap(const Volume& pred, const Volume& ref) {
  const auto pv = pred.u8();
  const auto rv = ref.u8();
  const std::int64_t n = pred.geom().voxel_count();
  const int chunks = 64;
  const std::int64_t step = (n + chunks - 1) / chunks;
  std::vector<OverlapCounts> partial(chunks);
  parallel_chunks(chunks, [&](std::int64_t cb, std::int64_t ce) {
    for (std::int64_t c = cb; c < ce; ++c) {
      OverlapCounts& o = partial[static_cast<std::size_t>(c)];
      const std::int64_t lo = c * step;
      const std::int64_t hi = std::min(n, lo + step);
      for (std::int64_t i = lo; i < hi; ++i) {
        const bool p = pv[static_cast<std::size_t>(i)] != 0;
        const bool r = rv[static_cast<std::size_t>(i)] != 0;
        o.tp += p && r;
        o.n_pred += p;
        o.n_ref += r;
        o.tn += !p && !r;
      }
    }
  });
  OverlapCounts total;
  for (const OverlapCounts& o : partial) {
    total.tp += o.tp;
    total.n_pred += o.n_pred;
    total.n_ref += o.n_ref;
    total.tn += o.tn;
  }
  return total;
}

void accumulate(MetricAggregate& agg, const std::optional<double>& v,
                std::vector<double>& store) {
  if (!v) return;
  store.push_back(*v);
  agg.n = static_cast<int>(store.size());
}

void finish(MetricAggregate& agg, const std::vector<double>& vals) {
  if (vals.empty()) return;
  double sum = 0.0;
  for (double v : vals) sum += v;
  const double mean = sum / static_cast<double>(vals.size());
  agg.mean = mean;
  if (vals.size() == 1) {
    agg.stddev = 0.0;
    return;
  }
  double ss = 0.0;
  for (double v : vals) ss += (v - mean) * (v - mean);
  agg.stddev = std::sqrt(ss / static_cast<double>(vals.size() - 1));
}

void csv_field(std::ostringstream& os, const std::optional<double>& v) {
  os << ',';
  if (v) os << *v;
}

}  // namespace

EvalReport evaluate(const Volume& pred, const Volume& ref,
                    const SkeletonTree* ref_tree,
                    double branch_detect_threshold) {
  require_binary_mask(pred, "evaluate pred");
  require_binary_mask(ref, "evaluate ref");
  require_same_grid(pred.geom(), ref.geom(), "evaluate");
  if (!(branch_detect_threshold >= 0.0 && branch_detect_threshold <= 1.0))
    throw DataError("evaluate: branch_detect_threshold must be in [0, 1]");

  const OverlapCounts o = count_overlap(pred, ref);
  if (o.n_ref == 0) throw DataError("evaluate: reference mask is empty");

  SkeletonTree local;
  if (!ref_tree) {
    local = skeletonize(ref);
    ref_tree = &local;
  } else if (!ref_tree->geom.same_grid(ref.geom())) {
    throw DataError("evaluate: tree grid does not match mask grid");
  }

  EvalReport rep;
  rep.branch_detect_threshold = branch_detect_threshold;
  rep.n_branches_ref = static_cast<std::int64_t>(ref_tree->branches.size());
  rep.total_length_mm = ref_tree->total_length_mm;

  const std::vector<double> covered_mm = skeleton_length_inside(*ref_tree, pred);
  const auto pv = pred.u8();
  const auto& g = pred.geom();
  for (const SkeletonBranch& br : ref_tree->branches) {
    std::int64_t covered = 0;
    for (const Index3& v : br.voxels)
      covered += pv[static_cast<std::size_t>(g.index(v))] != 0;
    PerBranchRow row;
    row.branch_id = br.id;
    row.generation = br.generation;
    row.covered_fraction =
        static_cast<double>(covered) / static_cast<double>(br.voxels.size());
    row.detected = row.covered_fraction >= branch_detect_threshold;
    rep.n_branches_detected += row.detected;
    rep.detected_length_mm += covered_mm[static_cast<std::size_t>(br.id) - 1];
    rep.per_branch.push_back(row);
  }

  if (rep.n_branches_ref > 0)
    rep.bd_pct = 100.0 * static_cast<double>(rep.n_branches_detected) /
                 static_cast<double>(rep.n_branches_ref);
  if (rep.total_length_mm > 0.0)
    rep.tld_pct = 100.0 * rep.detected_length_mm / rep.total_length_mm;
  // else: zero-length centerline (single-voxel blob) leaves TLD undefined

  if (o.n_pred > 0)
    rep.precision_pct = 100.0 * static_cast<double>(o.tp) /
                        static_cast<double>(o.n_pred);
  rep.dsc_pct = 100.0 * 2.0 * static_cast<double>(o.tp) /
                static_cast<double>(o.n_pred + o.n_ref);
  rep.sensitivity_pct =
      100.0 * static_cast<double>(o.tp) / static_cast<double>(o.n_ref);
  const std::int64_t n_bg = g.voxel_count() - o.n_ref;
  if (n_bg > 0)
    rep.specificity_pct =
        100.0 * static_cast<double>(o.tn) / static_cast<double>(n_bg);
  return rep;
}

CorpusReport aggregate_reports(std::vector<EvalReport> case_reports) {
  if (case_reports.empty())
    throw DataError("evaluate_corpus: no cases");
  CorpusReport out;
  std::vector<double> bd, tld, prec, dsc, sens, spec;
  for (const EvalReport& r : case_reports) {
    accumulate(out.bd, r.bd_pct, bd);
    accumulate(out.tld, r.tld_pct, tld);
    accumulate(out.precision, r.precision_pct, prec);
    accumulate(out.dsc, r.dsc_pct, dsc);
    accumulate(out.sensitivity, r.sensitivity_pct, sens);
    accumulate(out.specificity, r.specificity_pct, spec);
  }
  finish(out.bd, bd);
  finish(out.tld, tld);
  finish(out.precision, prec);
  finish(out.dsc, dsc);
  finish(out.sensitivity, sens);
  finish(out.specificity, spec);
  out.cases = std::move(case_reports);
  return out;
}

CorpusReport evaluate_corpus(const std::vector<EvalCase>& cases,
                             double branch_detect_threshold) {
  if (cases.empty()) throw DataError("evaluate_corpus: no cases");
  std::vector<EvalReport> reports;
  reports.reserve(cases.size());
  for (const EvalCase& c : cases) {
    if (!c.pred || !c.ref)
      throw DataError("evaluate_corpus: case with missing volume");
    reports.push_back(
        evaluate(*c.pred, *c.ref, c.ref_tree, branch_detect_threshold));
  }
  return aggregate_reports(std::move(reports));
}

namespace {

nlohmann::json opt_json(const std::optional<double>& v) {
  if (!v) return nullptr;
  return *v;
}

nlohmann::json agg_json(const MetricAggregate& a) {
  return {{"mean", opt_json(a.mean)},
          {"stddev", opt_json(a.stddev)},
          {"n", a.n}};
}

}  // namespace

nlohmann::json eval_report_json(const EvalReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const PerBranchRow& b : r.per_branch)
    rows.push_back({{"branch_id", b.branch_id},
                    {"generation", b.generation},
                    {"covered_fraction", b.covered_fraction},
                    {"detected", b.detected}});
  return {{"bd_pct", opt_json(r.bd_pct)},
          {"tld_pct", opt_json(r.tld_pct)},
          {"precision_pct", opt_json(r.precision_pct)},
          {"dsc_pct", opt_json(r.dsc_pct)},
          {"sensitivity_pct", opt_json(r.sensitivity_pct)},
          {"specificity_pct", opt_json(r.specificity_pct)},
          {"n_branches_ref", r.n_branches_ref},
          {"n_branches_detected", r.n_branches_detected},
          {"total_length_mm", r.total_length_mm},
          {"detected_length_mm", r.detected_length_mm},
          {"branch_detect_threshold", r.branch_detect_threshold},
          {"per_branch", std::move(rows)}};
}

nlohmann::json corpus_report_json(const CorpusReport& r) {
  nlohmann::json cases = nlohmann::json::array();
  for (const EvalReport& c : r.cases) cases.push_back(eval_report_json(c));
  return {{"bd", agg_json(r.bd)},
          {"tld", agg_json(r.tld)},
          {"precision", agg_json(r.precision)},
          {"dsc", agg_json(r.dsc)},
          {"sensitivity", agg_json(r.sensitivity)},
          {"specificity", agg_json(r.specificity)},
          {"cases", std::move(cases)}};
}

std::string corpus_report_csv(const CorpusReport& r) {
  std::ostringstream os;
  os << "case,bd_pct,tld_pct,precision_pct,dsc_pct,sensitivity_pct,"
        "specificity_pct,n_branches_ref,n_branches_detected,total_length_mm,"
        "detected_length_mm,branch_detect_threshold\n";
  for (std::size_t i = 0; i < r.cases.size(); ++i) {
    const EvalReport& c = r.cases[i];
    os << i;
    csv_field(os, c.bd_pct);
    csv_field(os, c.tld_pct);
    csv_field(os, c.precision_pct);
    csv_field(os, c.dsc_pct);
    csv_field(os, c.sensitivity_pct);
    csv_field(os, c.specificity_pct);
    os << ',' << c.n_branches_ref << ',' << c.n_branches_detected << ','
       << c.total_length_mm << ',' << c.detected_length_mm << ','
       << c.branch_detect_threshold << '\n';
  }
  return os.str();
}

}  // namespace airtopo
