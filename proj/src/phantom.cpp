#include "airtopo/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "airtopo/distance.hpp"
#include "airtopo/error.hpp"
#include "airtopo/parallel.hpp"
#include "airtopo/rng.hpp"

namespace airtopo {

namespace {

struct V3 {
  double x = 0, y = 0, z = 0;
};
V3 operator+(V3 a, V3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
V3 operator-(V3 a, V3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
V3 operator*(V3 a, double s) { return {a.x * s, a.y * s, a.z * s}; }
double dot(V3 a, V3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
double norm(V3 a) { return std::sqrt(dot(a, a)); }
V3 unit(V3 a) {
  const double n = norm(a);
  if (n <= 0.0) throw InternalError("phantom: zero direction");
  return a * (1.0 / n);
}
V3 cross(V3 a, V3 b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
double dist_to_segment(V3 p, V3 a, V3 b) {
  const V3 ab = b - a;
  const double len2 = dot(ab, ab);
  double t = len2 > 0.0 ? dot(p - a, ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const V3 d = p - (a + ab * t);
  return norm(d);
}

struct Builder {
  const PhantomSpec& spec;
  VolumeGeometry g;
  Rng rng;
  std::vector<std::uint8_t> lumen;
  std::vector<std::uint8_t> used;  // voxels already claimed by some chain
  SkeletonTree tree;
  V3 box_lo, box_hi;  // steering bounds, mm

  explicit Builder(const PhantomSpec& s) : spec(s), rng(s.seed) {
    g.dims = s.dims;
    g.spacing = s.spacing;
    g.origin = {0.0, 0.0, 0.0};
    g.validate();
    lumen.assign(static_cast<std::size_t>(g.voxel_count()), 0);
    used.assign(static_cast<std::size_t>(g.voxel_count()), 0);
    tree.geom = g;
  }

  double min_spacing() const {
    return std::min({g.spacing[0], g.spacing[1], g.spacing[2]});
  }
  double max_spacing() const {
    return std::max({g.spacing[0], g.spacing[1], g.spacing[2]});
  }

  bool in_box(V3 p) const {
    return p.x >= box_lo.x && p.x <= box_hi.x && p.y >= box_lo.y &&
           p.y <= box_hi.y && p.z >= box_lo.z && p.z <= box_hi.z;
  }

  Index3 to_voxel(V3 p) const {
    return {static_cast<int>(std::llround(p.x / g.spacing[0])),
            static_cast<int>(std::llround(p.y / g.spacing[1])),
            static_cast<int>(std::llround(p.z / g.spacing[2]))};
  }

  void stamp_ball(V3 c, double r) {
    const int x0 = std::max(0, static_cast<int>(std::floor((c.x - r) / g.spacing[0])));
    const int x1 = std::min(g.dims[0] - 1, static_cast<int>(std::ceil((c.x + r) / g.spacing[0])));
    const int y0 = std::max(0, static_cast<int>(std::floor((c.y - r) / g.spacing[1])));
    const int y1 = std::min(g.dims[1] - 1, static_cast<int>(std::ceil((c.y + r) / g.spacing[1])));
    const int z0 = std::max(0, static_cast<int>(std::floor((c.z - r) / g.spacing[2])));
    const int z1 = std::min(g.dims[2] - 1, static_cast<int>(std::ceil((c.z + r) / g.spacing[2])));
    const double r2 = r * r;
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const V3 v{x * g.spacing[0], y * g.spacing[1], z * g.spacing[2]};
          const V3 d = v - c;
          if (dot(d, d) <= r2) lumen[static_cast<std::size_t>(g.index(x, y, z))] = 1;
        }
  }

  struct Seg {
    V3 a, b;
    double r = 0.0;
    // Exemption reach from the segment start (the shared junction); INF for
    // the parent, a junction-sized ball for the sibling so two siblings may
    // fuse where they emerge but must keep daylight once they diverge.
    double near = kDistInf;
  };
  std::vector<Seg> seg_of;  // branch axis segments, indexed by branch id

  // A candidate tube must keep clear daylight to every tube stamped so far.
  // Overlap with the tubes it legitimately joins at its own junction (parent,
  // already-planted sibling) is expected; those are passed as exclusion
  // segments and lumen voxels inside them are ignored.
  bool clear_of_lumen(V3 start, V3 dir, double len, double radius,
                      const std::vector<Seg>& excl) const {
    const double dt = min_spacing() / 2.0;
    const double rho = radius + std::max(spec.clearance_mm, 2.0 * min_spacing());
    const double rho2 = rho * rho;
    for (double t = 0.0;; t += dt) {
      const bool last = t >= len;
      const V3 c = start + dir * std::min(t, len);
      const int x0 = std::max(0, static_cast<int>(std::floor((c.x - rho) / g.spacing[0])));
      const int x1 = std::min(g.dims[0] - 1, static_cast<int>(std::ceil((c.x + rho) / g.spacing[0])));
      const int y0 = std::max(0, static_cast<int>(std::floor((c.y - rho) / g.spacing[1])));
      const int y1 = std::min(g.dims[1] - 1, static_cast<int>(std::ceil((c.y + rho) / g.spacing[1])));
      const int z0 = std::max(0, static_cast<int>(std::floor((c.z - rho) / g.spacing[2])));
      const int z1 = std::min(g.dims[2] - 1, static_cast<int>(std::ceil((c.z + rho) / g.spacing[2])));
      for (int z = z0; z <= z1; ++z)
        for (int y = y0; y <= y1; ++y)
          for (int x = x0; x <= x1; ++x) {
            if (!lumen[static_cast<std::size_t>(g.index(x, y, z))]) continue;
            const V3 v{x * g.spacing[0], y * g.spacing[1], z * g.spacing[2]};
            const V3 d = v - c;
            if (dot(d, d) > rho2) continue;
            bool expected = false;
            for (const Seg& s : excl) {
              const V3 ja = v - s.a;
              if (norm(ja) <= s.near &&
                  dist_to_segment(v, s.a, s.b) <= s.r + 0.75) {
                expected = true;
                break;
              }
            }
            if (!expected) return false;
          }
      if (last) break;
    }
    return true;
  }

  // Bend dir so the endpoint lands inside the steering box; if that fails,
  // shorten the branch. Returns the usable length (0 drops the branch).
  double steer(V3 start, V3& dir, double len) const {
    for (int it = 0; it < 12; ++it) {
      const V3 e = start + dir * len;
      if (in_box(e)) return len;
      V3 d = dir;
      auto push = [](double v, double lo, double hi, double& comp) {
        if (v < lo) comp = std::abs(comp) * 0.7 + 0.1;
        else if (v > hi) comp = -(std::abs(comp) * 0.7 + 0.1);
      };
      push(e.x, box_lo.x, box_hi.x, d.x);
      push(e.y, box_lo.y, box_hi.y, d.y);
      push(e.z, box_lo.z, box_hi.z, d.z);
      dir = unit(d);
    }
    // Truncate to the last in-box point along dir.
    double t = len;
    auto clip = [&](double p, double v, double lo, double hi) {
      if (v > 1e-12) t = std::min(t, (hi - p) / v);
      else if (v < -1e-12) t = std::min(t, (lo - p) / v);
    };
    clip(start.x, dir.x, box_lo.x, box_hi.x);
    clip(start.y, dir.y, box_lo.y, box_hi.y);
    clip(start.z, dir.z, box_lo.z, box_hi.z);
    return std::max(0.0, t - 1e-6);
  }

  // Voxelize and stamp one branch; returns false if no new chain voxels
  // could be claimed (the subtree is then dropped).
  bool emit_branch(V3 start, V3 dir, double len, double radius,
                   std::int32_t parent_id, int gen, std::int32_t* id_out) {
    const double dt = min_spacing() / 3.0;
    std::vector<Index3> chain;
    bool truncated = false;
    for (double t = 0.0;; t += dt) {
      const bool last = t >= len;
      const V3 p = start + dir * std::min(t, len);
      const Index3 v = to_voxel(p);
      if (!g.contains(v)) { truncated = true; break; }
      const std::int64_t idx = g.index(v);
      if (used[static_cast<std::size_t>(idx)]) {
        if (!chain.empty() && !(v == chain.back())) { truncated = true; break; }
      } else if (chain.empty() || !(v == chain.back())) {
        chain.push_back(v);
        used[static_cast<std::size_t>(idx)] = 1;
      }
      if (last) break;
    }
    // Stubs (steering or collision truncation) are dropped outright so every
    // emitted branch can later have an interior sub-segment carved from it.
    if (chain.size() < 4) {
      for (const Index3& v : chain) used[static_cast<std::size_t>(g.index(v))] = 0;
      return false;
    }
    (void)truncated;

    SkeletonBranch br;
    br.id = static_cast<std::int32_t>(tree.branches.size()) + 1;
    br.parent = parent_id;
    br.generation = gen;
    br.voxels = chain;
    br.mean_radius_mm = radius;
    double length = 0.0;
    for (std::size_t i = 1; i < chain.size(); ++i)
      length += g.distance_mm(chain[i - 1], chain[i]);
    br.length_mm = length;
    tree.total_length_mm += length;
    tree.branches.push_back(std::move(br));
    *id_out = tree.branches.back().id;
    seg_of.resize(static_cast<std::size_t>(*id_out) + 1);
    seg_of[static_cast<std::size_t>(*id_out)] = {start, start + dir * len, radius};

    const double sdt = min_spacing() / 2.0;
    for (double t = 0.0;; t += sdt) {
      stamp_ball(start + dir * std::min(t, len), radius);
      if (t >= len) break;
    }
    return true;
  }

  static V3 rotate_about(V3 v, V3 axis, double ang) {
    const double c = std::cos(ang), s = std::sin(ang);
    return v * c + cross(axis, v) * s + axis * (dot(axis, v) * (1.0 - c));
  }

  // Returns whether the branch (and so its subtree) was planted. The RNG is
  // only consumed after the branch itself succeeds, so dropped or retried
  // candidates never shift later draws.
  bool grow(V3 start, V3 dir, double phi, double len, double radius,
            std::int32_t parent_id, int gen, int max_gen,
            const std::vector<Seg>& excl) {
    const double use_len = steer(start, dir, len);
    if (use_len < 4.0 * min_spacing()) return false;
    if (parent_id != 0 && !clear_of_lumen(start, dir, use_len, radius, excl))
      return false;
    std::int32_t id = 0;
    if (!emit_branch(start, dir, use_len, radius, parent_id, gen, &id))
      return false;
    if (gen + 1 >= max_gen) return true;

    const V3 end = start + dir * use_len;
    // Split plane roughly perpendicular to the parent's, like real bronchi.
    const double child_phi = phi + std::numbers::pi / 2.0 + rng.uniform(-0.5, 0.5);
    V3 u = std::abs(dir.z) < 0.9 ? unit(cross(dir, V3{0, 0, 1}))
                                 : unit(cross(dir, V3{1, 0, 0}));
    const V3 w = cross(dir, u);
    const V3 e = u * std::cos(child_phi) + w * std::sin(child_phi);
    const double jdeg = spec.angle_jitter_deg;
    const double a1 =
        (spec.branch_angle_deg + rng.uniform(-jdeg, jdeg)) * std::numbers::pi / 180.0;
    const double a2 =
        (spec.branch_angle_deg + rng.uniform(-jdeg, jdeg)) * std::numbers::pi / 180.0;
    const V3 d1 = unit(dir * std::cos(a1) + e * std::sin(a1));
    const V3 d2 = unit(dir * std::cos(a2) - e * std::sin(a2));
    const double clen = len * spec.length_decay;
    const double crad = radius * spec.radius_decay;
    // A blocked child is swung around the parent axis before giving up.
    constexpr double kRetry[] = {0.0, 0.5, -0.5, 1.0, -1.0, 1.5, -1.5};
    std::int32_t first_child = 0;
    for (int ci = 0; ci < 2; ++ci) {
      const V3 cd = ci == 0 ? d1 : d2;
      std::vector<Seg> child_excl{seg_of[static_cast<std::size_t>(id)]};
      if (first_child != 0) {
        Seg sib = seg_of[static_cast<std::size_t>(first_child)];
        sib.near = radius + crad +
                   std::max(spec.clearance_mm, 2.0 * min_spacing()) + 1.0;
        child_excl.push_back(sib);
      }
      const std::size_t before = tree.branches.size();
      for (const double delta : kRetry)
        if (grow(end, unit(rotate_about(cd, dir, delta)), child_phi, clen,
                 crad, id, gen + 1, max_gen, child_excl))
          break;
      if (ci == 0 && tree.branches.size() > before)
        first_child = static_cast<std::int32_t>(before) + 1;
    }
    return true;
  }
};

void triangular_blur(const VolumeGeometry& g, std::vector<float>& f) {
  const int nx = g.dims[0], ny = g.dims[1], nz = g.dims[2];
  std::vector<float> tmp(f.size());
  auto pass = [&](int axis, const std::vector<float>& src, std::vector<float>& dst) {
    const int len = g.dims[axis];
    std::int64_t stride, count;
    if (axis == 0) { stride = 1; count = static_cast<std::int64_t>(ny) * nz; }
    else if (axis == 1) { stride = nx; count = static_cast<std::int64_t>(nx) * nz; }
    else { stride = static_cast<std::int64_t>(nx) * ny; count = static_cast<std::int64_t>(nx) * ny; }
    parallel_chunks(count, [&](std::int64_t b, std::int64_t e) {
      for (std::int64_t li = b; li < e; ++li) {
        std::int64_t base;
        if (axis == 0) base = li * nx;
        else if (axis == 1) base = (li % nx) + (li / nx) * (static_cast<std::int64_t>(nx) * ny);
        else base = li;
        for (int i = 0; i < len; ++i) {
          const int lo = std::max(0, i - 1), hi = std::min(len - 1, i + 1);
          const float a = src[static_cast<std::size_t>(base + lo * stride)];
          const float b2 = src[static_cast<std::size_t>(base + i * stride)];
          const float c = src[static_cast<std::size_t>(base + hi * stride)];
          dst[static_cast<std::size_t>(base + i * stride)] = 0.25f * a + 0.5f * b2 + 0.25f * c;
        }
      }
    });
  };
  pass(0, f, tmp);
  pass(1, tmp, f);
  pass(2, f, tmp);
  f.swap(tmp);
}

}  // namespace

Phantom generate_phantom(const PhantomSpec& spec) {
  if (spec.generations < 1) throw DataError("phantom: generations must be >= 1");
  if (!(spec.radius_decay > 0.0 && spec.radius_decay < 1.0) ||
      !(spec.length_decay > 0.0 && spec.length_decay <= 1.0))
    throw DataError("phantom: decay factors must be in (0, 1)");
  if (!(spec.trunk_radius_mm > 0.0 && spec.trunk_length_mm > 0.0))
    throw DataError("phantom: trunk dimensions must be positive");
  if (!(spec.clearance_mm >= 0.0))
    throw DataError("phantom: clearance must be non-negative");

  Builder b(spec);
  const double min_sp = b.min_spacing();

  // Keep the deepest radius at one voxel or more; shrink the tree if not.
  int max_gen = spec.generations;
  while (max_gen > 1 &&
         spec.trunk_radius_mm * std::pow(spec.radius_decay, max_gen - 1) < min_sp)
    --max_gen;

  const double margin = 2.0 * spec.trunk_radius_mm + 3.0 * b.max_spacing();
  const std::array<double, 3> ext = {(spec.dims[0] - 1) * spec.spacing[0],
                                     (spec.dims[1] - 1) * spec.spacing[1],
                                     (spec.dims[2] - 1) * spec.spacing[2]};
  for (double e : ext)
    if (e <= 2.0 * margin) throw DataError("phantom: grid too small for trunk radius");
  b.box_lo = {margin, margin, margin};
  b.box_hi = {ext[0] - margin, ext[1] - margin, ext[2] - margin};

  const V3 start{ext[0] / 2.0, ext[1] / 2.0, ext[2] - margin};
  const double phi0 = b.rng.uniform(0.0, 2.0 * std::numbers::pi);
  b.grow(start, V3{0, 0, -1}, phi0, spec.trunk_length_mm, spec.trunk_radius_mm,
         /*parent_id=*/0, /*gen=*/0, max_gen, {});
  if (b.tree.branches.empty())
    throw InternalError("phantom: tree generation produced no branches");
  b.tree.root = b.tree.branches.front().voxels.front();
  b.tree.root_branch_id = 1;

  Phantom out;
  out.generations_used = max_gen;
  out.gt_tree = std::move(b.tree);
  out.gt_mask = Volume::label8(b.g);
  {
    auto m = out.gt_mask.u8();
    std::copy(b.lumen.begin(), b.lumen.end(), m.begin());
  }

  // Render HU: lumen, a one-voxel wall rind, parenchyma elsewhere; then a
  // fixed partial-volume blur and per-voxel Gaussian noise.
  const std::int64_t n = b.g.voxel_count();
  Volume wall = dilate(out.gt_mask, 1);
  auto wallv = wall.u8();
  std::vector<float> hu(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    if (b.lumen[static_cast<std::size_t>(i)]) hu[static_cast<std::size_t>(i)] = static_cast<float>(spec.lumen_hu);
    else if (wallv[i]) hu[static_cast<std::size_t>(i)] = static_cast<float>(spec.wall_hu);
    else hu[static_cast<std::size_t>(i)] = static_cast<float>(spec.parenchyma_hu);
  }
  triangular_blur(b.g, hu);

  out.ct = Volume::hu16(b.g);
  auto ct = out.ct.i16();
  for (std::int64_t i = 0; i < n; ++i) {
    const double v = hu[static_cast<std::size_t>(i)] +
                     b.rng.normal() * spec.noise_sigma_hu;
    ct[i] = static_cast<std::int16_t>(std::clamp(std::llround(v),
                                                 static_cast<long long>(-32768),
                                                 static_cast<long long>(32767)));
  }
  return out;
}

}  // namespace airtopo
