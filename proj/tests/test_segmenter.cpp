#include <doctest.h>

#include <cstring>

#include "airtopo/error.hpp"
#include "airtopo/metrics.hpp"
#include "airtopo/parallel.hpp"
#include "airtopo/phantom.hpp"
#include "airtopo/segmenter.hpp"

using namespace airtopo;

namespace {

Phantom small_phantom(std::uint64_t seed, int generations, double noise) {
  PhantomSpec spec;
  spec.generations = generations;
  spec.dims = {96, 96, 96};
  spec.noise_sigma_hu = noise;
  spec.seed = seed;
  return generate_phantom(spec);
}

bool same_probs(const ProbVolume& a, const ProbVolume& b) {
  if (a.k() != b.k()) return false;
  for (int c = 0; c < a.k(); ++c) {
    const auto av = a.class_probs[c].f32();
    const auto bv = b.class_probs[c].f32();
    if (std::memcmp(av.data(), bv.data(), av.size() * sizeof(float)) != 0)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("segmenter recovers a noiseless phantom it was trained on") {
  const Phantom ph = small_phantom(21, 3, 0.0);
  ClassicalSegmenter seg;
  seg.train({{&ph.ct, &ph.gt_mask}});
  const Volume pred = binarize_prediction(seg.predict(ph.ct));
  const EvalReport rep = evaluate(pred, ph.gt_mask, &ph.gt_tree);
  REQUIRE(rep.tld_pct.has_value());
  CHECK(*rep.tld_pct >= 95.0);
  // The classical learner is a weak stand-in; DSC is only sanity-checked.
  CHECK(*rep.dsc_pct > 50.0);
}

TEST_CASE("segmenter handles noisy phantoms and stays deterministic") {
  const Phantom ph = small_phantom(22, 4, 30.0);
  ClassicalSegmenter seg;
  const SegmenterSnapshot snap = seg.train({{&ph.ct, &ph.gt_mask}});
  CHECK(snap.id.rfind("cgs-", 0) == 0);
  CHECK(snap.id == seg.snapshot().id);

  const ProbVolume p1 = seg.predict(ph.ct);
  const ProbVolume p2 = seg.predict(ph.ct);
  CHECK(same_probs(p1, p2));

  // Round-trip through the snapshot reproduces predictions exactly.
  ClassicalSegmenter other;
  other.load(snap);
  CHECK(other.snapshot().id == snap.id);
  CHECK(same_probs(other.predict(ph.ct), p1));

  // Thread count must not change the fit or the prediction.
  const int saved = thread_count();
  set_thread_count(1);
  ClassicalSegmenter serial;
  const SegmenterSnapshot snap1 = serial.train({{&ph.ct, &ph.gt_mask}});
  const ProbVolume q1 = serial.predict(ph.ct);
  set_thread_count(7);
  ClassicalSegmenter wide;
  const SegmenterSnapshot snap7 = wide.train({{&ph.ct, &ph.gt_mask}});
  const ProbVolume q7 = wide.predict(ph.ct);
  set_thread_count(saved);
  CHECK(snap1.id == snap7.id);
  CHECK(snap1.model == snap7.model);
  CHECK(same_probs(q1, q7));
}

TEST_CASE("warm start blends class statistics with factor one half") {
  PhantomSpec spec;
  spec.generations = 4;
  spec.dims = {128, 128, 128};
  spec.noise_sigma_hu = 20.0;
  spec.seed = 7;
  const Phantom a = generate_phantom(spec);
  spec.seed = 3;
  const Phantom b = generate_phantom(spec);

  ClassicalSegmenter on_a;
  const SegmenterSnapshot sa = on_a.train({{&a.ct, &a.gt_mask}});
  ClassicalSegmenter on_b;
  const SegmenterSnapshot sb = on_b.train({{&b.ct, &b.gt_mask}});

  // The blend identity below assumes both fits saw the same class support:
  // classes absent from one fit keep the other's shape instead.
  for (int c = 0; c < 3; ++c) {
    REQUIRE(sa.model["classes"][c]["count"].get<std::int64_t>() > 0);
    REQUIRE(sb.model["classes"][c]["count"].get<std::int64_t>() > 0);
  }

  ClassicalSegmenter warm;
  warm.train({{&a.ct, &a.gt_mask}});
  const SegmenterSnapshot sw = warm.train({{&b.ct, &b.gt_mask}});

  for (int c = 0; c < kSegClassCount; ++c) {
    const auto& ca = sa.model["classes"][c];
    const auto& cb = sb.model["classes"][c];
    const auto& cw = sw.model["classes"][c];
    CHECK(cw["prior"].get<double>() ==
          doctest::Approx(0.5 * ca["prior"].get<double>() +
                          0.5 * cb["prior"].get<double>())
              .epsilon(1e-12));
    for (int f = 0; f < kSegFeatureCount; ++f) {
      const double ma = ca["features"][f]["mean"].get<double>();
      const double mb = cb["features"][f]["mean"].get<double>();
      const double mw = cw["features"][f]["mean"].get<double>();
      CHECK(mw == doctest::Approx(0.5 * ma + 0.5 * mb).epsilon(1e-12));
    }
  }
}

TEST_CASE("segmenter rejects degenerate or malformed input") {
  const Phantom ph = small_phantom(25, 2, 10.0);
  ClassicalSegmenter seg;

  const Volume empty_label = Volume::label8(ph.ct.geom());
  CHECK_THROWS_AS(seg.train({{&ph.ct, &empty_label}}), DataError);
  CHECK_THROWS_AS(seg.train({}), DataError);
  CHECK_THROWS_AS(seg.predict(ph.ct), DataError);

  Volume bad_values = Volume::label8(ph.ct.geom());
  bad_values.u8()[0] = 7;
  CHECK_THROWS_AS(seg.train({{&ph.ct, &bad_values}}), DataError);

  VolumeGeometry other = ph.ct.geom();
  other.dims = {10, 10, 10};
  const Volume mismatched = Volume::label8(other, 1);
  CHECK_THROWS_AS(seg.train({{&ph.ct, &mismatched}}), DataError);

  // A failed fit must not clobber an existing model.
  seg.train({{&ph.ct, &ph.gt_mask}});
  const std::string before = seg.snapshot().id;
  CHECK_THROWS_AS(seg.train({{&ph.ct, &empty_label}}), DataError);
  CHECK(seg.snapshot().id == before);

  SegmenterSnapshot garbage;
  garbage.model = {{"kind", "something_else"}};
  CHECK_THROWS_AS(seg.load(garbage), DataError);
}

TEST_CASE("binarize_prediction thresholds foreground and keeps one component") {
  const Phantom ph = small_phantom(26, 3, 0.0);
  const ProbVolume p = ProbVolume::from_binary(ph.gt_mask);
  const Volume mask = binarize_prediction(p);
  const auto mv = mask.u8();
  const auto gv = ph.gt_mask.u8();
  CHECK(std::memcmp(mv.data(), gv.data(), mv.size()) == 0);
  CHECK_THROWS_AS(binarize_prediction(p, 1.5), DataError);
}
