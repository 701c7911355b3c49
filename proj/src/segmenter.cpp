#include "airtopo/segmenter.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "airtopo/anatomy.hpp"
#include "airtopo/components.hpp"
#include "airtopo/error.hpp"
#include "airtopo/parallel.hpp"

namespace airtopo {

namespace {

constexpr double kVarianceFloor = 1e-3;
constexpr double kLog2Pi = 1.8378770664093453;

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string snapshot_id(const std::string& dump) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "cgs-%016llx",
                static_cast<unsigned long long>(fnv1a64(dump)));
  return buf;
}

void require_ct(const Volume& ct, const char* who) {
  if (ct.kind() != ElementKind::Hu16)
    throw DataError(std::string(who) + ": CT grid must be hu16");
}

// Raw per-class feature moments, combined deterministically in chunk order.
struct Moments {
  std::int64_t n = 0;
  std::array<double, kSegFeatureCount> sum{};
  std::array<double, kSegFeatureCount> sum_sq{};

  void add(const Moments& o) {
    n += o.n;
    for (int f = 0; f < kSegFeatureCount; ++f) {
      sum[f] += o.sum[f];
      sum_sq[f] += o.sum_sq[f];
    }
  }
};

using ClassMoments = std::array<Moments, kSegClassCount>;

void accumulate_case(const Volume& ct, const Volume& classes,
                     ClassMoments& total) {
  const auto feats = segmenter_features(ct);
  const auto label = classes.u8();
  const std::int64_t n = ct.voxel_count();
  constexpr int kChunks = 64;
  const std::int64_t step = (n + kChunks - 1) / kChunks;
  std::vector<ClassMoments> partial(kChunks);
  parallel_chunks(kChunks, [&](std::int64_t cb, std::int64_t ce) {
    for (std::int64_t c = cb; c < ce; ++c) {
      ClassMoments& m = partial[static_cast<std::size_t>(c)];
      const std::int64_t lo = c * step;
      const std::int64_t hi = std::min(n, lo + step);
      for (std::int64_t i = lo; i < hi; ++i) {
        Moments& cm = m[label[i]];
        ++cm.n;
        for (int f = 0; f < kSegFeatureCount; ++f) {
          const double x = feats[static_cast<std::size_t>(i)]
                                [static_cast<std::size_t>(f)];
          cm.sum[f] += x;
          cm.sum_sq[f] += x * x;
        }
      }
    }
  });
  for (const ClassMoments& m : partial)
    for (int c = 0; c < kSegClassCount; ++c) total[c].add(m[c]);
}

}  // namespace

std::vector<std::array<double, kSegFeatureCount>> segmenter_features(
    const Volume& ct) {
  require_ct(ct, "segmenter_features");
  const VolumeGeometry& g = ct.geom();
  const auto hu = ct.i16();
  const std::int64_t n = g.voxel_count();
  std::vector<std::array<double, kSegFeatureCount>> out(
      static_cast<std::size_t>(n));
  const auto [nx, ny, nz] = g.dims;
  const auto [sx, sy, sz] = g.spacing;
  parallel_chunks(n, [&](std::int64_t begin, std::int64_t end) {
    for (std::int64_t i = begin; i < end; ++i) {
      const Index3 v = g.unindex(i);
      const double raw = hu[i];

      double acc = 0.0;
      int cnt = 0;
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int x = v.x + dx, y = v.y + dy, z = v.z + dz;
            if (!g.contains(x, y, z)) continue;
            acc += hu[g.index(x, y, z)];
            ++cnt;
          }

      // Central differences in HU/mm, one-sided at the border.
      auto diff = [&](int axis, int lo_ok, int hi_ok, double sp) {
        Index3 a = v, b = v;
        int* pa = axis == 0 ? &a.x : axis == 1 ? &a.y : &a.z;
        int* pb = axis == 0 ? &b.x : axis == 1 ? &b.y : &b.z;
        *pa -= lo_ok;
        *pb += hi_ok;
        const double span = (lo_ok + hi_ok) * sp;
        return span > 0.0 ? (hu[g.index(b)] - hu[g.index(a)]) / span : 0.0;
      };
      const double gx = diff(0, v.x > 0, v.x < nx - 1, sx);
      const double gy = diff(1, v.y > 0, v.y < ny - 1, sy);
      const double gz = diff(2, v.z > 0, v.z < nz - 1, sz);

      auto& row = out[static_cast<std::size_t>(i)];
      row[0] = raw;
      row[1] = acc / cnt;
      row[2] = std::sqrt(gx * gx + gy * gy + gz * gz);
    }
  });
  return out;
}

ClassicalSegmenter::ClassicalSegmenter(std::array<int, 2> cutoffs)
    : cutoffs_(cutoffs) {
  if (cutoffs[0] < 0 || cutoffs[1] < cutoffs[0])
    throw DataError("segmenter: generation cutoffs must be ordered");
}

SegmenterSnapshot ClassicalSegmenter::train(
    const std::vector<TrainingCase>& cases) {
  if (cases.empty()) throw DataError("segmenter: no training cases");

  ClassMoments total{};
  for (const TrainingCase& tc : cases) {
    if (tc.ct == nullptr || tc.label == nullptr)
      throw DataError("segmenter: null training case");
    require_ct(*tc.ct, "segmenter");
    if (tc.label->kind() != ElementKind::Label8)
      throw DataError("segmenter: training label must be label8");
    require_same_grid(tc.ct->geom(), tc.label->geom(), "segmenter");

    const auto lv = tc.label->u8();
    std::uint8_t max_value = 0;
    for (std::uint8_t u : lv) max_value = std::max(max_value, u);
    if (max_value >= kSegClassCount)
      throw DataError("segmenter: training label values must be < 4");

    if (max_value <= 1 && foreground_count(*tc.label) > 0) {
      const AmcLabel amc = decompose_amc(*tc.label, cutoffs_);
      accumulate_case(*tc.ct, amc.volume, total);
    } else {
      accumulate_case(*tc.ct, *tc.label, total);
    }
  }

  std::int64_t grand = 0;
  int present = 0;
  for (const Moments& m : total) {
    grand += m.n;
    present += m.n > 0 ? 1 : 0;
  }
  if (present < 2)
    throw DataError("segmenter: degenerate training labels (single class)");

  std::array<ClassStats, kSegClassCount> fresh{};
  for (int c = 0; c < kSegClassCount; ++c) {
    const Moments& m = total[static_cast<std::size_t>(c)];
    ClassStats& s = fresh[static_cast<std::size_t>(c)];
    s.count = m.n;
    s.prior = static_cast<double>(m.n) / static_cast<double>(grand);
    for (int f = 0; f < kSegFeatureCount; ++f) {
      if (m.n == 0) continue;
      const double mean = m.sum[f] / static_cast<double>(m.n);
      const double var = m.sum_sq[f] / static_cast<double>(m.n) - mean * mean;
      s.feat[static_cast<std::size_t>(f)] = {mean,
                                             std::max(var, kVarianceFloor)};
    }
  }

  if (fitted_) {
    // Warm start: exponential moving average toward the fresh fit.
    for (int c = 0; c < kSegClassCount; ++c) {
      ClassStats& nw = fresh[static_cast<std::size_t>(c)];
      const ClassStats& old = classes_[static_cast<std::size_t>(c)];
      nw.prior = 0.5 * old.prior + 0.5 * nw.prior;
      if (nw.count == 0) {
        nw.feat = old.feat;  // class unseen this round: keep its shape
      } else if (old.count > 0) {
        for (int f = 0; f < kSegFeatureCount; ++f) {
          FeatStats& fs = nw.feat[static_cast<std::size_t>(f)];
          const FeatStats& po = old.feat[static_cast<std::size_t>(f)];
          fs.mean = 0.5 * po.mean + 0.5 * fs.mean;
          fs.var = std::max(0.5 * po.var + 0.5 * fs.var, kVarianceFloor);
        }
      }
    }
  }

  classes_ = fresh;
  fitted_ = true;
  return snapshot();
}

SegmenterSnapshot ClassicalSegmenter::snapshot() const {
  if (!fitted_) throw DataError("segmenter: no model fitted");
  nlohmann::json classes = nlohmann::json::array();
  for (int c = 0; c < kSegClassCount; ++c) {
    const ClassStats& s = classes_[static_cast<std::size_t>(c)];
    nlohmann::json feat = nlohmann::json::array();
    for (const FeatStats& fs : s.feat)
      feat.push_back({{"mean", fs.mean}, {"var", fs.var}});
    classes.push_back({{"label", c},
                       {"prior", s.prior},
                       {"count", s.count},
                       {"features", feat}});
  }
  SegmenterSnapshot snap;
  snap.model = {{"schema_version", 1},
                {"kind", "classical_gaussian_segmenter"},
                {"generation_cutoffs", {cutoffs_[0], cutoffs_[1]}},
                {"classes", classes}};
  snap.id = snapshot_id(snap.model.dump());
  return snap;
}

void ClassicalSegmenter::load(const SegmenterSnapshot& snapshot) {
  try {
    const nlohmann::json& m = snapshot.model;
    if (m.at("kind").get<std::string>() != "classical_gaussian_segmenter")
      throw DataError("segmenter: snapshot kind mismatch");
    const auto& cj = m.at("classes");
    if (cj.size() != kSegClassCount)
      throw DataError("segmenter: snapshot must hold 4 classes");
    std::array<ClassStats, kSegClassCount> loaded{};
    for (int c = 0; c < kSegClassCount; ++c) {
      const auto& e = cj.at(static_cast<std::size_t>(c));
      ClassStats& s = loaded[static_cast<std::size_t>(c)];
      s.prior = e.at("prior").get<double>();
      s.count = e.at("count").get<std::int64_t>();
      if (s.prior < 0.0 || s.prior > 1.0)
        throw DataError("segmenter: snapshot prior out of range");
      const auto& fj = e.at("features");
      if (fj.size() != kSegFeatureCount)
        throw DataError("segmenter: snapshot must hold 3 features per class");
      for (int f = 0; f < kSegFeatureCount; ++f) {
        const auto& ff = fj.at(static_cast<std::size_t>(f));
        FeatStats& fs = s.feat[static_cast<std::size_t>(f)];
        fs.mean = ff.at("mean").get<double>();
        fs.var = ff.at("var").get<double>();
        if (!(fs.var > 0.0))
          throw DataError("segmenter: snapshot variance must be positive");
      }
    }
    const auto& cut = m.at("generation_cutoffs");
    cutoffs_ = {cut.at(0).get<int>(), cut.at(1).get<int>()};
    classes_ = loaded;
    fitted_ = true;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("segmenter: malformed snapshot: ") + e.what());
  }
}

ProbVolume ClassicalSegmenter::predict(const Volume& ct) const {
  if (!fitted_) throw DataError("segmenter: predict before train/load");
  require_ct(ct, "segmenter");
  const auto feats = segmenter_features(ct);
  const std::int64_t n = ct.voxel_count();

  // Uniform class priors: the posterior is the normalized likelihood.
  // Empirical frequencies are recorded in snapshots but deliberately not
  // used — with self-training they drift upward every round (pseudo-labels
  // out-grow the originals) and drag the decision boundary with them.
  // Classes never seen get probability zero.
  std::array<double, kSegClassCount> log_prior{};
  std::array<std::array<double, kSegFeatureCount>, kSegClassCount> inv2var{};
  std::array<std::array<double, kSegFeatureCount>, kSegClassCount> log_norm{};
  for (int c = 0; c < kSegClassCount; ++c) {
    const ClassStats& s = classes_[static_cast<std::size_t>(c)];
    log_prior[c] = s.prior > 0.0 ? 0.0 : -1e300;
    for (int f = 0; f < kSegFeatureCount; ++f) {
      const FeatStats& fs = s.feat[static_cast<std::size_t>(f)];
      inv2var[c][f] = 0.5 / fs.var;
      log_norm[c][f] = -0.5 * (kLog2Pi + std::log(fs.var));
    }
  }

  ProbVolume out;
  for (int c = 0; c < kSegClassCount; ++c)
    out.class_probs.push_back(Volume::real32(ct.geom()));
  std::array<float*, kSegClassCount> grids{};
  for (int c = 0; c < kSegClassCount; ++c)
    grids[c] = out.class_probs[static_cast<std::size_t>(c)].f32().data();

  parallel_chunks(n, [&](std::int64_t begin, std::int64_t end) {
    for (std::int64_t i = begin; i < end; ++i) {
      const auto& row = feats[static_cast<std::size_t>(i)];
      std::array<double, kSegClassCount> ll{};
      double best = -1e300;
      for (int c = 0; c < kSegClassCount; ++c) {
        double acc = log_prior[c];
        for (int f = 0; f < kSegFeatureCount; ++f) {
          const double d =
              row[static_cast<std::size_t>(f)] -
              classes_[static_cast<std::size_t>(c)]
                  .feat[static_cast<std::size_t>(f)]
                  .mean;
          acc += log_norm[c][f] - d * d * inv2var[c][f];
        }
        ll[c] = acc;
        best = std::max(best, acc);
      }
      double norm = 0.0;
      for (int c = 0; c < kSegClassCount; ++c) {
        ll[c] = std::exp(ll[c] - best);
        norm += ll[c];
      }
      for (int c = 0; c < kSegClassCount; ++c)
        grids[c][i] = static_cast<float>(ll[c] / norm);
    }
  });
  return out;
}

Volume binarize_prediction(const ProbVolume& p, double threshold) {
  p.validate();
  if (!(threshold >= 0.0 && threshold <= 1.0))
    throw DataError("binarize_prediction: threshold must be in [0,1]");
  const VolumeGeometry& g = p.geom();
  Volume mask = Volume::label8(g);
  auto mv = mask.u8();
  std::vector<const float*> fg;
  for (int c = 1; c < p.k(); ++c)
    fg.push_back(p.class_probs[static_cast<std::size_t>(c)].f32().data());
  parallel_chunks(g.voxel_count(), [&](std::int64_t begin, std::int64_t end) {
    for (std::int64_t i = begin; i < end; ++i) {
      double s = 0.0;
      for (const float* grid : fg) s += grid[i];
      mv[i] = std::clamp(s, 0.0, 1.0) > threshold ? 1 : 0;
    }
  });
  return largest_component(mask);
}

}  // namespace airtopo
