// airtopo — batch command-line front end for the airway-tree topology
// library. Each subcommand wraps exactly one library operation; outputs are
// staged under ".partial"-suffixed names and renamed only once complete, so
// a failed run never leaves a final-named file half-written.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

#include <unistd.h>

#include <array>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "airtopo/anatomy.hpp"
#include "airtopo/breakage.hpp"
#include "airtopo/components.hpp"
#include "airtopo/error.hpp"
#include "airtopo/losses.hpp"
#include "airtopo/metrics.hpp"
#include "airtopo/mhd_io.hpp"
#include "airtopo/parallel.hpp"
#include "airtopo/phantom.hpp"
#include "airtopo/pipeline.hpp"
#include "airtopo/segmenter.hpp"
#include "airtopo/skeleton.hpp"
#include "airtopo/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using namespace airtopo;

// Flag-level misuse discovered after CLI11 parsing (mismatched repeat
// counts, nothing to do, ...). Maps to exit code 1 like any parse error.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr int kSchemaVersion = 1;

struct Common {
  int threads = 0;  // 0 = all hardware threads
  bool json_out = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--threads", c.threads,
                  "worker threads; 0 means all hardware threads (results "
                  "never depend on this)")
      ->capture_default_str();
  cmd->add_flag("--json", c.json_out,
                "print a machine-readable JSON summary on stdout");
}

void apply_threads(const Common& c) {
  int n = c.threads;
  if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
  set_thread_count(n > 0 ? n : 1);
}

json summary_base(const char* command) {
  return json{{"schema_version", kSchemaVersion}, {"command", command}};
}

// Prints the JSON summary with --json, the human lines otherwise.
void emit(const Common& c, const json& j, const std::string& human) {
  if (c.json_out)
    std::cout << j.dump(2) << "\n";
  else
    std::cout << human;
}

// ---------------------------------------------------------------------------
// Atomic output helpers. A volume is staged inside a ".partial"-suffixed
// subdirectory (the header references the raw file by bare name, so the pair
// stays consistent), then the raw payload is renamed into place before the
// header that points at it.

fs::path raw_path_of(fs::path mhd) {
  mhd.replace_extension(".raw");
  return mhd;
}

void commit_volume(const Volume& v, const fs::path& final_mhd) {
  if (final_mhd.extension() != ".mhd")
    throw UsageError("output volume path must end in .mhd: " +
                     final_mhd.string());
  fs::path dir = final_mhd.parent_path();
  if (dir.empty()) dir = ".";
  fs::create_directories(dir);
  const fs::path stage =
      dir / (".stage-" + std::to_string(::getpid()) + ".partial");
  fs::create_directories(stage);
  const fs::path stage_mhd = stage / final_mhd.filename();
  write_volume(v, stage_mhd);
  fs::rename(raw_path_of(stage_mhd), raw_path_of(final_mhd));
  fs::rename(stage_mhd, final_mhd);
  std::error_code ec;
  fs::remove(stage, ec);
}

void commit_text(const std::string& text, const fs::path& final_path) {
  fs::path dir = final_path.parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  fs::path stage = final_path;
  stage += ".partial";
  {
    std::ofstream f(stage, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open for writing: " + stage.string());
    f << text;
    f.flush();
    if (!f) throw DataError("write failed: " + stage.string());
  }
  fs::rename(stage, final_path);
}

void commit_json(const json& j, const fs::path& final_path) {
  commit_text(j.dump(2) + "\n", final_path);
}

std::string slurp(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

json parse_json_file(const fs::path& path) {
  try {
    return json::parse(slurp(path));
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

SkeletonTree read_tree(const fs::path& path) {
  return skeleton_from_json(parse_json_file(path));
}

SegmenterSnapshot read_snapshot(const fs::path& path) {
  const json j = parse_json_file(path);
  if (!j.is_object() || !j.contains("id") || !j.contains("model"))
    throw DataError("snapshot file needs {id, model}: " + path.string());
  SegmenterSnapshot snap;
  if (!j.at("id").is_string())
    throw DataError("snapshot id must be a string: " + path.string());
  snap.id = j.at("id").get<std::string>();
  snap.model = j.at("model");
  return snap;
}

json snapshot_json(const SegmenterSnapshot& snap) {
  return json{{"schema_version", kSchemaVersion},
              {"id", snap.id},
              {"model", snap.model}};
}

std::string fmt_pct(const std::optional<double>& v) {
  if (!v) return "--";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", *v);
  return buf;
}

std::string corpus_line(const CorpusReport& r) {
  std::ostringstream os;
  os << "BD " << fmt_pct(r.bd.mean) << "  TLD " << fmt_pct(r.tld.mean)
     << "  precision " << fmt_pct(r.precision.mean) << "  DSC "
     << fmt_pct(r.dsc.mean) << "  sensitivity " << fmt_pct(r.sensitivity.mean)
     << "  specificity " << fmt_pct(r.specificity.mean) << "  (cases: "
     << r.cases.size() << ")";
  return os.str();
}

// ---------------------------------------------------------------------------
// phantom

struct PhantomOpts {
  Common c;
  PhantomSpec spec;
  std::string out;
};

void run_phantom(const PhantomOpts& o) {
  apply_threads(o.c);
  const Phantom ph = generate_phantom(o.spec);
  const fs::path out = o.out;
  commit_volume(ph.ct, out / "ct.mhd");
  commit_volume(ph.gt_mask, out / "gt.mhd");
  commit_json(skeleton_to_json(ph.gt_tree), out / "tree.json");

  json j = summary_base("phantom");
  j["seed"] = o.spec.seed;
  j["generations_requested"] = o.spec.generations;
  j["generations_used"] = ph.generations_used;
  j["branches"] = ph.gt_tree.branches.size();
  j["total_length_mm"] = ph.gt_tree.total_length_mm;
  j["outputs"] = {{"ct", (out / "ct.mhd").string()},
                  {"gt", (out / "gt.mhd").string()},
                  {"tree", (out / "tree.json").string()}};
  std::ostringstream hs;
  hs << "phantom: " << ph.gt_tree.branches.size() << " branches, "
     << ph.generations_used << " generations -> " << out.string()
     << "/{ct.mhd,gt.mhd,tree.json}\n";
  emit(o.c, j, hs.str());
}

// ---------------------------------------------------------------------------
// decompose

struct DecomposeOpts {
  Common c;
  std::string mask, out, tree, sidecar;
  std::array<int, 2> cutoffs{1, 3};
};

void run_decompose(const DecomposeOpts& o) {
  apply_threads(o.c);
  const Volume mask = read_volume(o.mask);
  std::optional<SkeletonTree> tree;
  if (!o.tree.empty()) tree = read_tree(o.tree);
  bool multi_component = false;
  const AmcLabel label = decompose_amc(mask, o.cutoffs,
                                       tree ? &*tree : nullptr,
                                       &multi_component);
  commit_volume(label.volume, o.out);
  fs::path sidecar = o.sidecar.empty()
                         ? fs::path(o.out).replace_extension(".json")
                         : fs::path(o.sidecar);
  commit_json(amc_sidecar_json(label), sidecar);

  std::array<std::int64_t, 4> counts{};
  for (std::uint8_t v : label.volume.u8()) ++counts[v];
  json j = summary_base("decompose");
  j["generation_cutoffs"] = o.cutoffs;
  j["multi_component"] = multi_component;
  j["voxels"] = {{"background", counts[0]},
                 {"large", counts[1]},
                 {"medium", counts[2]},
                 {"small", counts[3]}};
  j["outputs"] = {{"amc", o.out}, {"sidecar", sidecar.string()}};
  std::ostringstream hs;
  hs << "decompose: L " << counts[1] << "  M " << counts[2] << "  S "
     << counts[3] << " voxels -> " << o.out << "\n";
  emit(o.c, j, hs.str());
}

// ---------------------------------------------------------------------------
// skeletonize

struct SkeletonizeOpts {
  Common c;
  std::string mask, out, skeleton_mask;
};

void run_skeletonize(const SkeletonizeOpts& o) {
  apply_threads(o.c);
  const Volume mask = read_volume(o.mask);
  const SkeletonTree tree = skeletonize(mask);
  commit_json(skeleton_to_json(tree), o.out);
  if (!o.skeleton_mask.empty()) {
    Volume skel = Volume::label8(tree.geom, 0);
    auto span = skel.u8();
    for (const Index3& v : tree.all_voxels()) span[tree.geom.index(v)] = 1;
    commit_volume(skel, o.skeleton_mask);
  }

  int leaves = 0;
  for (const auto& b : tree.branches)
    if (tree.is_leaf(b.id)) ++leaves;
  json j = summary_base("skeletonize");
  j["branches"] = tree.branches.size();
  j["leaves"] = leaves;
  j["total_length_mm"] = tree.total_length_mm;
  j["root"] = {tree.root.x, tree.root.y, tree.root.z};
  j["outputs"] = {{"tree", o.out}};
  if (!o.skeleton_mask.empty()) j["outputs"]["skeleton_mask"] = o.skeleton_mask;
  std::ostringstream hs;
  hs << "skeletonize: " << tree.branches.size() << " branches (" << leaves
     << " leaves), " << tree.total_length_mm << " mm -> " << o.out << "\n";
  emit(o.c, j, hs.str());
}

// ---------------------------------------------------------------------------
// attention

struct AttentionOpts {
  Common c;
  std::string mask, out, out_raw;
  double gamma = 5.0;
};

void run_attention(const AttentionOpts& o) {
  apply_threads(o.c);
  const Volume mask = read_volume(o.mask);
  const AttentionMap attn = breakage_attention(mask, o.gamma);
  if (!o.out.empty()) commit_volume(attn.normalized, o.out);
  if (!o.out_raw.empty()) commit_volume(attn.raw, o.out_raw);

  json j = summary_base("attention");
  j["gamma_mm"] = attn.gamma_mm;
  j["components"] = connected_components(mask).count;
  j["breakage_centers"] = json::array();
  for (const Index3& v : attn.breakage_centers)
    j["breakage_centers"].push_back({v.x, v.y, v.z});
  j["outputs"] = json::object();
  if (!o.out.empty()) j["outputs"]["normalized"] = o.out;
  if (!o.out_raw.empty()) j["outputs"]["raw"] = o.out_raw;
  // The centers are the command's primary result, so the summary is always
  // JSON regardless of --json.
  std::cout << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// simulate-breakage

struct SimulateOpts {
  Common c;
  std::string mask, tree, out;
  double fraction = 0.5;
  double min_removal = 0.10;
  double max_removal = 0.30;
  std::uint64_t seed = 0;
};

void run_simulate(const SimulateOpts& o) {
  apply_threads(o.c);
  const Volume mask = read_volume(o.mask);
  std::optional<SkeletonTree> tree;
  if (!o.tree.empty()) tree = read_tree(o.tree);
  const BreakageSample sample =
      simulate_breakage(mask, o.fraction, {o.min_removal, o.max_removal},
                        o.seed, tree ? &*tree : nullptr);
  const fs::path out = o.out;
  commit_volume(sample.broken_mask, out / "broken.mhd");
  commit_volume(sample.breakage_gt, out / "removed.mhd");
  commit_json(breakage_manifest_json(sample), out / "manifest.json");

  json j = summary_base("simulate-breakage");
  j["seed"] = sample.seed;
  j["branch_fraction"] = sample.branch_fraction;
  j["removal_range"] = {sample.removal_range.first,
                        sample.removal_range.second};
  j["removed_branches"] = sample.removed_branches.size();
  j["removed_voxels"] = foreground_count(sample.breakage_gt);
  j["outputs"] = {{"broken", (out / "broken.mhd").string()},
                  {"removed", (out / "removed.mhd").string()},
                  {"manifest", (out / "manifest.json").string()}};
  std::ostringstream hs;
  hs << "simulate-breakage: carved " << sample.removed_branches.size()
     << " leaf branches (" << foreground_count(sample.breakage_gt)
     << " voxels) -> " << out.string() << "/\n";
  emit(o.c, j, hs.str());
}

// ---------------------------------------------------------------------------
// connect / refine

struct ConnectOpts {
  Common c;
  std::string mask, ct, out;
  double gamma = 5.0;
};

void run_connect(const ConnectOpts& o) {
  apply_threads(o.c);
  const Volume mask = read_volume(o.mask);
  const Volume ct = read_volume(o.ct);
  const GeometricConnector connector;
  const int components_before = connected_components(mask).count;
  const Volume result = reconnect_mask(mask, ct, connector, o.gamma);
  commit_volume(result, o.out);

  json j = summary_base("connect");
  j["gamma_mm"] = o.gamma;
  j["components_before"] = components_before;
  j["voxels_in"] = foreground_count(mask);
  j["voxels_out"] = foreground_count(result);
  j["outputs"] = {{"mask", o.out}};
  std::ostringstream hs;
  hs << "connect: " << components_before << " components, "
     << foreground_count(mask) << " -> " << foreground_count(result)
     << " voxels -> " << o.out << "\n";
  emit(o.c, j, hs.str());
}

struct RefineOpts {
  Common c;
  std::string pred, ref, ct, out;
  double gamma = 5.0;
};

void run_refine(const RefineOpts& o) {
  apply_threads(o.c);
  const Volume pred = read_volume(o.pred);
  const Volume ref = read_volume(o.ref);
  const Volume ct = read_volume(o.ct);
  const GeometricConnector connector;
  const Volume result = refine_pseudo_label(pred, ref, ct, connector, o.gamma);
  commit_volume(result, o.out);

  json j = summary_base("refine");
  j["gamma_mm"] = o.gamma;
  j["voxels_pred"] = foreground_count(pred);
  j["voxels_ref"] = foreground_count(ref);
  j["voxels_out"] = foreground_count(result);
  j["outputs"] = {{"pseudo_label", o.out}};
  std::ostringstream hs;
  hs << "refine: pred " << foreground_count(pred) << " + ref "
     << foreground_count(ref) << " -> " << foreground_count(result)
     << " voxels -> " << o.out << "\n";
  emit(o.c, j, hs.str());
}

// ---------------------------------------------------------------------------
// segment

struct SegmentOpts {
  Common c;
  std::vector<std::string> train_ct, train_label;
  std::string init_snapshot, snapshot_out, snapshot, ct, out, prob_out;
  double threshold = 0.5;
  std::array<int, 2> cutoffs{1, 3};
};

void run_segment(const SegmentOpts& o) {
  apply_threads(o.c);
  const bool training = !o.train_ct.empty() || !o.train_label.empty();
  const bool predicting = !o.ct.empty();
  if (!training && !predicting)
    throw UsageError(
        "nothing to do: give --train-ct/--train-label pairs and/or --ct");
  if (o.train_ct.size() != o.train_label.size())
    throw UsageError("--train-ct and --train-label counts differ");
  if (training && !o.snapshot.empty())
    throw UsageError("--snapshot is for predict-only runs; use "
                     "--init-snapshot to warm-start training");
  if (!training && o.snapshot.empty())
    throw UsageError("predicting needs --snapshot or training pairs");
  if (predicting && o.out.empty() && o.prob_out.empty())
    throw UsageError("predicting needs --out and/or --prob-out");

  ClassicalSegmenter seg(o.cutoffs);
  json j = summary_base("segment");
  std::ostringstream hs;

  if (training) {
    if (!o.init_snapshot.empty()) seg.load(read_snapshot(o.init_snapshot));
    std::deque<Volume> storage;
    std::vector<TrainingCase> cases;
    for (std::size_t i = 0; i < o.train_ct.size(); ++i) {
      storage.push_back(read_volume(o.train_ct[i]));
      const Volume* ct = &storage.back();
      storage.push_back(read_volume(o.train_label[i]));
      cases.push_back(TrainingCase{ct, &storage.back()});
    }
    const SegmenterSnapshot snap = seg.train(cases);
    if (!o.snapshot_out.empty())
      commit_json(snapshot_json(snap), o.snapshot_out);
    j["snapshot_id"] = snap.id;
    j["trained_cases"] = cases.size();
    if (!o.snapshot_out.empty()) j["outputs"]["snapshot"] = o.snapshot_out;
    hs << "segment: trained on " << cases.size() << " cases, snapshot "
       << snap.id;
    if (!o.snapshot_out.empty()) hs << " -> " << o.snapshot_out;
    hs << "\n";
  } else {
    const SegmenterSnapshot snap = read_snapshot(o.snapshot);
    seg.load(snap);
    j["snapshot_id"] = snap.id;
  }

  if (predicting) {
    const Volume ct = read_volume(o.ct);
    const ProbVolume prob = seg.predict(ct);
    if (!o.out.empty()) {
      const Volume mask = binarize_prediction(prob, o.threshold);
      commit_volume(mask, o.out);
      j["outputs"]["mask"] = o.out;
      j["mask_voxels"] = foreground_count(mask);
      hs << "segment: predicted " << foreground_count(mask) << " voxels -> "
         << o.out << "\n";
    }
    if (!o.prob_out.empty()) {
      json paths = json::array();
      for (int k = 0; k < prob.k(); ++k) {
        fs::path p = o.prob_out + "_c" + std::to_string(k) + ".mhd";
        commit_volume(prob.class_probs[k], p);
        paths.push_back(p.string());
      }
      j["outputs"]["class_probs"] = paths;
      hs << "segment: wrote " << prob.k() << " class-probability grids -> "
         << o.prob_out << "_c*.mhd\n";
    }
  }
  emit(o.c, j, hs.str());
}

// ---------------------------------------------------------------------------
// iterate

struct IterateOpts {
  Common c;
  std::string config, out;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

int parse_int_setting(const std::map<std::string, std::string>& kv,
                      const std::string& key, int fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    std::size_t pos = 0;
    const int v = std::stoi(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw DataError("run config: " + key + " is not an integer: " +
                    it->second);
  }
}

double parse_double_setting(const std::map<std::string, std::string>& kv,
                            const std::string& key, double fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    std::size_t pos = 0;
    const double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw DataError("run config: " + key + " is not a number: " + it->second);
  }
}

std::array<int, 2> parse_cutoffs_setting(
    const std::map<std::string, std::string>& kv, std::array<int, 2> fallback) {
  auto it = kv.find("cutoffs");
  if (it == kv.end()) return fallback;
  int a = 0, b = 0;
  char extra = 0;
  if (std::sscanf(it->second.c_str(), "%d,%d%c", &a, &b, &extra) != 2)
    throw DataError("run config: cutoffs must be \"g1,g2\": " + it->second);
  return {a, b};
}

struct LoadedCase {
  std::string name;
  Volume ct, label;
  std::optional<Volume> ground_truth;
  std::optional<SkeletonTree> gt_tree;
};

void run_iterate(const IterateOpts& o) {
  apply_threads(o.c);
  static const std::vector<std::string> known = {
      "cases_dir",          "seed",
      "max_iters",          "select_iter",
      "gamma_mm",           "lambda",
      "cutoffs",            "binarize_threshold",
      "branch_detect_threshold"};
  const fs::path config_path = o.config;
  const auto kv = parse_run_config(slurp(config_path), known);
  if (!kv.count("cases_dir"))
    throw DataError("run config: missing required key cases_dir");

  const int max_iters = parse_int_setting(kv, "max_iters", 5);
  const int select_iter = parse_int_setting(kv, "select_iter", 3);
  const double gamma_mm = parse_double_setting(kv, "gamma_mm", 5.0);
  const double lambda = parse_double_setting(kv, "lambda", 0.25);
  const double binarize_threshold =
      parse_double_setting(kv, "binarize_threshold", 0.5);
  const double branch_detect_threshold =
      parse_double_setting(kv, "branch_detect_threshold", 0.8);
  const std::array<int, 2> cutoffs = parse_cutoffs_setting(kv, {1, 3});
  std::uint64_t seed = static_cast<std::uint64_t>(
      parse_int_setting(kv, "seed", 0));
  if (o.seed_given) seed = o.seed;  // flag wins over the config

  // Relative paths in the config resolve against the config's directory.
  fs::path cases_root = kv.at("cases_dir");
  if (cases_root.is_relative())
    cases_root = config_path.parent_path() / cases_root;
  if (!fs::is_directory(cases_root))
    throw DataError("cases_dir is not a directory: " + cases_root.string());

  // Each immediate subdirectory holding ct.mhd + label.mhd is one case;
  // gt.mhd and gt_tree.json add phantom-mode scoring. Directories with
  // neither volume are ignored.
  std::vector<fs::path> case_dirs;
  for (const auto& entry : fs::directory_iterator(cases_root))
    if (entry.is_directory()) case_dirs.push_back(entry.path());
  std::sort(case_dirs.begin(), case_dirs.end());

  std::deque<LoadedCase> loaded;
  for (const fs::path& dir : case_dirs) {
    const bool has_ct = fs::exists(dir / "ct.mhd");
    const bool has_label = fs::exists(dir / "label.mhd");
    if (!has_ct && !has_label) continue;
    if (!has_ct || !has_label)
      throw DataError("case " + dir.string() +
                      " needs both ct.mhd and label.mhd");
    LoadedCase lc;
    lc.name = dir.filename().string();
    lc.ct = read_volume(dir / "ct.mhd");
    lc.label = read_volume(dir / "label.mhd");
    const bool has_gt = fs::exists(dir / "gt.mhd");
    const bool has_tree = fs::exists(dir / "gt_tree.json");
    if (has_tree && !has_gt)
      throw DataError("case " + dir.string() +
                      " has gt_tree.json without gt.mhd");
    if (has_gt) lc.ground_truth = read_volume(dir / "gt.mhd");
    if (has_tree) lc.gt_tree = read_tree(dir / "gt_tree.json");
    loaded.push_back(std::move(lc));
  }
  if (loaded.empty())
    throw DataError("no cases under " + cases_root.string() +
                    " (need subdirectories with ct.mhd + label.mhd)");

  std::vector<SelfLearningCase> cases;
  std::vector<std::string> names;
  for (const LoadedCase& lc : loaded) {
    SelfLearningCase sc;
    sc.name = lc.name;
    sc.ct = &lc.ct;
    sc.label = &lc.label;
    if (lc.ground_truth) sc.ground_truth = &*lc.ground_truth;
    if (lc.gt_tree) sc.gt_tree = &*lc.gt_tree;
    cases.push_back(sc);
    names.push_back(lc.name);
  }

  ClassicalSegmenter segmenter(cutoffs);
  const GeometricConnector connector;
  const SelfLearningResult result = iterate_self_learning(
      cases, segmenter, connector, max_iters, select_iter, gamma_mm,
      binarize_threshold, branch_detect_threshold);

  const fs::path out = o.out;
  std::ostringstream hs;
  for (std::size_t i = 0; i < result.iterations.size(); ++i) {
    const IterationRecord& rec = result.iterations[i];
    char leaf[16];
    std::snprintf(leaf, sizeof(leaf), "iter_%03d", rec.iter_index);
    const fs::path iter_dir = out / leaf;
    for (std::size_t k = 0; k < rec.pseudo_labels.size(); ++k) {
      commit_volume(rec.pseudo_labels[k],
                    iter_dir / (names[k] + "_pseudo.mhd"));
      commit_json(skeleton_to_json(skeletonize(rec.pseudo_labels[k])),
                  iter_dir / (names[k] + "_tree.json"));
    }
    json report{{"schema_version", kSchemaVersion},
                {"iter", rec.iter_index},
                {"selected", rec.selected},
                {"case_names", names},
                {"report", corpus_report_json(rec.report)}};
    commit_json(report, iter_dir / "report.json");
    json snap = snapshot_json(result.snapshots[i]);
    snap["selected"] = rec.selected;
    commit_json(snap, iter_dir / "snapshot.json");
    hs << "iter " << rec.iter_index << ": " << corpus_line(rec.report)
       << (rec.selected ? "  [selected]" : "") << "\n";
  }

  json manifest = self_learning_manifest_json(result, names);
  manifest["config"] = {
      {"cases_dir", cases_root.string()},
      {"seed", seed},
      {"max_iters", max_iters},
      {"gamma_mm", gamma_mm},
      {"lambda", lambda},
      {"cutoffs", cutoffs},
      {"binarize_threshold", binarize_threshold},
      {"branch_detect_threshold", branch_detect_threshold},
  };
  commit_json(manifest, out / "manifest.json");

  if (result.aborted) {
    // Everything up to the failure is on disk and complete; the run as a
    // whole still failed.
    std::cout << hs.str();
    throw DataError("self-learning aborted: " + result.abort_reason);
  }
  emit(o.c, manifest, hs.str());
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOpts {
  Common c;
  std::vector<std::string> pred, ref, ref_tree;
  double branch_threshold = 0.8;
  std::string out, csv;
};

void run_evaluate(const EvaluateOpts& o) {
  apply_threads(o.c);
  if (o.pred.empty()) throw UsageError("need at least one --pred/--ref pair");
  if (o.pred.size() != o.ref.size())
    throw UsageError("--pred and --ref counts differ");
  if (!o.ref_tree.empty() && o.ref_tree.size() != o.ref.size())
    throw UsageError("--ref-tree count must match --ref when given");

  std::deque<Volume> volumes;
  std::deque<SkeletonTree> trees;
  std::vector<EvalCase> cases;
  for (std::size_t i = 0; i < o.pred.size(); ++i) {
    volumes.push_back(read_volume(o.pred[i]));
    const Volume* pred = &volumes.back();
    volumes.push_back(read_volume(o.ref[i]));
    EvalCase ec;
    ec.pred = pred;
    ec.ref = &volumes.back();
    if (!o.ref_tree.empty()) {
      trees.push_back(read_tree(o.ref_tree[i]));
      ec.ref_tree = &trees.back();
    }
    cases.push_back(ec);
  }
  const CorpusReport report = evaluate_corpus(cases, o.branch_threshold);

  json j = summary_base("evaluate");
  j["case_names"] = o.pred;
  j["report"] = corpus_report_json(report);
  if (!o.out.empty()) {
    commit_json(j, o.out);
    j["outputs"] = {{"report", o.out}};
  }
  if (!o.csv.empty()) {
    commit_text(corpus_report_csv(report), o.csv);
    j["outputs"]["csv"] = o.csv;
  }
  std::ostringstream hs;
  hs << "evaluate: " << corpus_line(report) << "\n";
  for (std::size_t i = 0; i < report.cases.size(); ++i) {
    const EvalReport& r = report.cases[i];
    hs << "  " << o.pred[i] << ": BD " << fmt_pct(r.bd_pct) << " TLD "
       << fmt_pct(r.tld_pct) << " precision " << fmt_pct(r.precision_pct)
       << " DSC " << fmt_pct(r.dsc_pct) << "\n";
  }
  emit(o.c, j, hs.str());
}

// ---------------------------------------------------------------------------
// loss

struct LossOpts {
  Common c;
  std::vector<std::string> prob;
  std::string amc, weights;
  std::array<int, 2> cutoffs{1, 3};
  double lambda = 0.25;
  double alpha = 0.3;
  double r = 0.7;
};

void run_loss(const LossOpts& o) {
  apply_threads(o.c);
  if (static_cast<int>(o.prob.size()) != kSegClassCount)
    throw UsageError("need exactly " + std::to_string(kSegClassCount) +
                     " --prob grids (background, large, medium, small)");
  ProbVolume p;
  for (const std::string& path : o.prob)
    p.class_probs.push_back(read_volume(path));
  p.validate();

  AmcLabel amc;
  amc.volume = read_volume(o.amc);
  amc.generation_cutoffs = o.cutoffs;
  if (amc.volume.kind() != ElementKind::Label8)
    throw DataError("--amc must be a label volume: " + o.amc);
  for (std::uint8_t v : amc.volume.u8())
    if (v > kAmcSmall)
      throw DataError("--amc has values outside {0,1,2,3}: " + o.amc);

  std::optional<Volume> weights;
  if (!o.weights.empty()) weights = read_volume(o.weights);

  double dice = 0.0, ce = 0.0;
  for (std::uint8_t cls : {kAmcLarge, kAmcMedium, kAmcSmall}) {
    Volume support = Volume::label8(amc.volume.geom(), 0);
    auto out = support.u8();
    auto in = amc.volume.u8();
    for (std::int64_t i = 0; i < amc.volume.geom().voxel_count(); ++i)
      out[i] = in[i] == cls ? 1 : 0;
    dice += dice_loss(p.class_probs[cls], support);
    ce += ce_loss(p.class_probs[cls], support);
  }
  const double amc_l = amc_loss(p, amc);
  const double gul = gul_loss(p, amc_to_binary(amc),
                              weights ? &*weights : nullptr, o.alpha, o.r);
  const double total = amc_l + o.lambda * gul;

  json j = summary_base("loss");
  j["dice"] = dice;
  j["ce"] = ce;
  j["gul"] = gul;
  j["amc"] = amc_l;
  j["total"] = total;
  j["params"] = {{"lambda", o.lambda},
                 {"alpha", o.alpha},
                 {"r", o.r},
                 {"generation_cutoffs", o.cutoffs},
                 {"weights", o.weights.empty() ? "default" : o.weights}};
  // Loss evaluation always reports as JSON; there is no human variant.
  std::cout << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------

void build_cli(CLI::App& app) {
  app.require_subcommand(1);

  {
    auto o = std::make_shared<PhantomOpts>();
    CLI::App* cmd = app.add_subcommand(
        "phantom", "generate a synthetic airway CT with known mask and tree");
    add_common(cmd, o->c);
    cmd->add_option("--generations", o->spec.generations,
                    "tree depth; trunk is generation 0")
        ->capture_default_str();
    cmd->add_option("--trunk-radius", o->spec.trunk_radius_mm,
                    "trunk radius in mm")
        ->capture_default_str();
    cmd->add_option("--trunk-length", o->spec.trunk_length_mm,
                    "trunk length in mm")
        ->capture_default_str();
    cmd->add_option("--radius-decay", o->spec.radius_decay,
                    "child/parent radius ratio")
        ->capture_default_str();
    cmd->add_option("--length-decay", o->spec.length_decay,
                    "child/parent length ratio")
        ->capture_default_str();
    cmd->add_option("--branch-angle", o->spec.branch_angle_deg,
                    "branching half-angle in degrees")
        ->capture_default_str();
    cmd->add_option("--angle-jitter", o->spec.angle_jitter_deg,
                    "uniform angle jitter in degrees")
        ->capture_default_str();
    cmd->add_option("--dims", o->spec.dims, "grid size x,y,z")
        ->delimiter(',')
        ->capture_default_str();
    cmd->add_option("--spacing", o->spec.spacing, "voxel spacing mm x,y,z")
        ->delimiter(',')
        ->capture_default_str();
    cmd->add_option("--lumen-hu", o->spec.lumen_hu, "lumen intensity")
        ->capture_default_str();
    cmd->add_option("--wall-hu", o->spec.wall_hu, "airway wall intensity")
        ->capture_default_str();
    cmd->add_option("--parenchyma-hu", o->spec.parenchyma_hu,
                    "background intensity")
        ->capture_default_str();
    cmd->add_option("--noise-sigma", o->spec.noise_sigma_hu,
                    "Gaussian noise sigma in HU")
        ->capture_default_str();
    cmd->add_option("--clearance", o->spec.clearance_mm,
                    "minimum daylight between non-adjacent tubes, mm")
        ->capture_default_str();
    cmd->add_option("--seed", o->spec.seed, "random seed")->required();
    cmd->add_option("--out", o->out,
                    "output directory for ct.mhd, gt.mhd, tree.json")
        ->required();
    cmd->callback([o] { run_phantom(*o); });
  }

  {
    auto o = std::make_shared<DecomposeOpts>();
    CLI::App* cmd = app.add_subcommand(
        "decompose",
        "split a binary airway mask into large/medium/small classes");
    add_common(cmd, o->c);
    cmd->add_option("--mask", o->mask, "binary mask (.mhd)")->required();
    cmd->add_option("--out", o->out, "class volume output (.mhd)")->required();
    cmd->add_option("--cutoffs", o->cutoffs,
                    "generation cutoffs g1,g2: large <= g1 < medium <= g2 < "
                    "small")
        ->delimiter(',')
        ->capture_default_str();
    cmd->add_option("--tree", o->tree,
                    "precomputed skeleton tree JSON (skips skeletonization)");
    cmd->add_option("--sidecar", o->sidecar,
                    "metadata JSON path (default: --out with .json)");
    cmd->callback([o] { run_decompose(*o); });
  }

  {
    auto o = std::make_shared<SkeletonizeOpts>();
    CLI::App* cmd = app.add_subcommand(
        "skeletonize", "extract the centerline tree of a binary mask");
    add_common(cmd, o->c);
    cmd->add_option("--mask", o->mask, "binary mask (.mhd)")->required();
    cmd->add_option("--out", o->out, "skeleton tree JSON output")->required();
    cmd->add_option("--skeleton-mask", o->skeleton_mask,
                    "optional binary volume of skeleton voxels (.mhd)");
    cmd->callback([o] { run_skeletonize(*o); });
  }

  {
    auto o = std::make_shared<AttentionOpts>();
    CLI::App* cmd = app.add_subcommand(
        "attention",
        "breakage attention: second-nearest-component distance map");
    add_common(cmd, o->c);
    cmd->add_option("--mask", o->mask, "binary mask (.mhd)")->required();
    cmd->add_option("--gamma", o->gamma, "sigmoid center in mm")
        ->capture_default_str();
    cmd->add_option("--out", o->out, "normalized attention map (.mhd)");
    cmd->add_option("--out-raw", o->out_raw, "raw distance map (.mhd)");
    cmd->callback([o] { run_attention(*o); });
  }

  {
    auto o = std::make_shared<SimulateOpts>();
    CLI::App* cmd = app.add_subcommand(
        "simulate-breakage",
        "carve gaps into peripheral branches of a mask");
    add_common(cmd, o->c);
    cmd->add_option("--mask", o->mask, "binary mask (.mhd)")->required();
    cmd->add_option("--fraction", o->fraction,
                    "fraction of leaf branches to break")
        ->capture_default_str();
    cmd->add_option("--min-removal", o->min_removal,
                    "minimum removed fraction per branch")
        ->capture_default_str();
    cmd->add_option("--max-removal", o->max_removal,
                    "maximum removed fraction per branch")
        ->capture_default_str();
    cmd->add_option("--seed", o->seed, "random seed")->required();
    cmd->add_option("--tree", o->tree, "precomputed skeleton tree JSON");
    cmd->add_option("--out", o->out,
                    "output directory for broken.mhd, removed.mhd, "
                    "manifest.json")
        ->required();
    cmd->callback([o] { run_simulate(*o); });
  }

  {
    auto o = std::make_shared<ConnectOpts>();
    CLI::App* cmd = app.add_subcommand(
        "connect", "bridge breakages in a mask and keep the main component");
    add_common(cmd, o->c);
    cmd->add_option("--mask", o->mask, "binary mask (.mhd)")->required();
    cmd->add_option("--ct", o->ct, "CT volume (.mhd)")->required();
    cmd->add_option("--gamma", o->gamma, "attention sigmoid center in mm")
        ->capture_default_str();
    cmd->add_option("--out", o->out, "reconnected mask (.mhd)")->required();
    cmd->callback([o] { run_connect(*o); });
  }

  {
    auto o = std::make_shared<RefineOpts>();
    CLI::App* cmd = app.add_subcommand(
        "refine",
        "fuse a prediction with its reference and reconnect the result");
    add_common(cmd, o->c);
    cmd->add_option("--pred", o->pred, "predicted mask (.mhd)")->required();
    cmd->add_option("--ref", o->ref, "reference mask (.mhd)")->required();
    cmd->add_option("--ct", o->ct, "CT volume (.mhd)")->required();
    cmd->add_option("--gamma", o->gamma, "attention sigmoid center in mm")
        ->capture_default_str();
    cmd->add_option("--out", o->out, "pseudo-label output (.mhd)")->required();
    cmd->callback([o] { run_refine(*o); });
  }

  {
    auto o = std::make_shared<SegmentOpts>();
    CLI::App* cmd = app.add_subcommand(
        "segment", "train the voxel classifier and/or predict a mask");
    add_common(cmd, o->c);
    cmd->add_option("--train-ct", o->train_ct, "training CT (repeatable)");
    cmd->add_option("--train-label", o->train_label,
                    "training label, binary or 4-class (repeatable, pairs "
                    "with --train-ct in order)");
    cmd->add_option("--init-snapshot", o->init_snapshot,
                    "snapshot JSON to warm-start training from");
    cmd->add_option("--snapshot-out", o->snapshot_out,
                    "write the trained snapshot JSON here");
    cmd->add_option("--snapshot", o->snapshot,
                    "snapshot JSON to predict with (predict-only runs)");
    cmd->add_option("--ct", o->ct, "CT volume to predict (.mhd)");
    cmd->add_option("--out", o->out, "binarized prediction output (.mhd)");
    cmd->add_option("--prob-out", o->prob_out,
                    "prefix for per-class probability grids "
                    "(<prefix>_c0.mhd ... _c3.mhd)");
    cmd->add_option("--threshold", o->threshold,
                    "foreground probability threshold")
        ->capture_default_str();
    cmd->add_option("--cutoffs", o->cutoffs,
                    "generation cutoffs for decomposing binary labels")
        ->delimiter(',')
        ->capture_default_str();
    cmd->callback([o] { run_segment(*o); });
  }

  {
    auto o = std::make_shared<IterateOpts>();
    CLI::App* cmd = app.add_subcommand(
        "iterate", "iterative self-learning over a case directory");
    add_common(cmd, o->c);
    cmd->add_option("--config", o->config,
                    "run config: key = value lines (cases_dir required; "
                    "max_iters, select_iter, gamma_mm, lambda, cutoffs, "
                    "binarize_threshold, branch_detect_threshold, seed)")
        ->required();
    cmd->add_option("--out", o->out, "output directory")->required();
    cmd->add_option("--seed", o->seed,
                    "recorded in the manifest; overrides the config key (the "
                    "pipeline itself is fully deterministic)")
        ->trigger_on_parse()
        ->each([o](const std::string&) { o->seed_given = true; });
    cmd->callback([o] { run_iterate(*o); });
  }

  {
    auto o = std::make_shared<EvaluateOpts>();
    CLI::App* cmd = app.add_subcommand(
        "evaluate", "branch/length/overlap metrics of predictions against "
                    "references");
    add_common(cmd, o->c);
    cmd->add_option("--pred", o->pred, "predicted mask (repeatable)")
        ->required();
    cmd->add_option("--ref", o->ref,
                    "reference mask (repeatable, pairs with --pred)")
        ->required();
    cmd->add_option("--ref-tree", o->ref_tree,
                    "reference skeleton JSON (repeatable; all or none)");
    cmd->add_option("--branch-threshold", o->branch_threshold,
                    "centerline coverage needed to count a branch detected")
        ->capture_default_str();
    cmd->add_option("--out", o->out, "write the report JSON here");
    cmd->add_option("--csv", o->csv, "write the per-case CSV here");
    cmd->callback([o] { run_evaluate(*o); });
  }

  {
    auto o = std::make_shared<LossOpts>();
    CLI::App* cmd = app.add_subcommand(
        "loss", "evaluate the multi-class + union training loss");
    add_common(cmd, o->c);
    cmd->add_option("--prob", o->prob,
                    "class probability grid, 4x in class order (.mhd)");
    cmd->add_option("--amc", o->amc, "4-class label volume (.mhd)")
        ->required();
    cmd->add_option("--weights", o->weights,
                    "union-loss weight grid (.mhd; default: inverse "
                    "centerline distance)");
    cmd->add_option("--cutoffs", o->cutoffs, "generation cutoffs g1,g2")
        ->delimiter(',')
        ->capture_default_str();
    cmd->add_option("--lambda", o->lambda, "union loss weight")
        ->capture_default_str();
    cmd->add_option("--alpha", o->alpha, "union loss false-positive weight")
        ->capture_default_str();
    cmd->add_option("--r", o->r, "union loss root exponent")
        ->capture_default_str();
    cmd->callback([o] { run_loss(*o); });
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "airway-tree topology toolkit: phantoms, skeletons, breakage "
      "attention and reconnection, self-learning, metrics"};
  build_cli(app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "airtopo: " << e.what() << "\n";
    return 1;
  } catch (const airtopo::DataError& e) {
    std::cerr << "airtopo: " << e.what() << "\n";
    return 2;
  } catch (const airtopo::InternalError& e) {
    std::cerr << "airtopo: internal error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "airtopo: internal error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
