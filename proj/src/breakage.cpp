#include "airtopo/breakage.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

#include <nlohmann/json.hpp>

#include "airtopo/components.hpp"
#include "airtopo/distance.hpp"
#include "airtopo/error.hpp"
#include "airtopo/parallel.hpp"
#include "airtopo/rng.hpp"

namespace airtopo {

namespace {

float normalize_attention(double raw_mm, double gamma_mm) {
  // exp overflows to +inf for sentinel-sized raws; 1/(1+inf) == 0 is what
  // we want there.
  return static_cast<float>(1.0 / (1.0 + std::exp(raw_mm - gamma_mm)));
}

}  // namespace

AttentionMap breakage_attention(const Volume& mask, double gamma_mm) {
  require_binary_mask(mask, "breakage_attention mask");
  if (foreground_count(mask) == 0)
    throw DataError("breakage_attention: mask is empty");
  if (!(gamma_mm > 0.0))
    throw DataError("breakage_attention: gamma must be positive");
  const auto& g = mask.geom();
  const std::int64_t n = g.voxel_count();

  AttentionMap out;
  out.gamma_mm = gamma_mm;
  out.raw = Volume::real32(g, kAttentionSentinel);
  out.normalized = Volume::real32(g);
  auto raw = out.raw.f32();
  auto norm = out.normalized.f32();

  auto cl = connected_components(mask, 26);
  if (cl.count >= 2) {
    auto field = second_component_distance(cl, /*spacing_aware=*/true);
    parallel_chunks(n, [&](std::int64_t b, std::int64_t e) {
      for (std::int64_t i = b; i < e; ++i)
        if (dist_defined(field.second_sq[i]))
          raw[i] = static_cast<float>(std::sqrt(field.second_sq[i]));
    });
  }
  parallel_chunks(n, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t i = b; i < e; ++i)
      norm[i] = normalize_attention(raw[i], gamma_mm);
  });

  // Candidate centers: non-strict 26-local maxima of the normalized map
  // with value >= 0.5, greedily thinned so kept centers are > gamma apart.
  const auto nbr = neighbor_offsets(26);
  std::vector<std::int64_t> cands;
  for (std::int64_t i = 0; i < n; ++i) {
    if (norm[i] < 0.5f) continue;
    const Index3 p = g.unindex(i);
    bool is_max = true;
    for (const auto& d : nbr) {
      const Index3 q{p.x + d.x, p.y + d.y, p.z + d.z};
      if (!g.contains(q)) continue;
      if (norm[g.index(q)] > norm[i]) { is_max = false; break; }
    }
    if (is_max) cands.push_back(i);
  }
  std::sort(cands.begin(), cands.end(), [&](std::int64_t a, std::int64_t b) {
    if (norm[a] != norm[b]) return norm[a] > norm[b];
    return a < b;
  });
  for (std::int64_t c : cands) {
    const Index3 p = g.unindex(c);
    bool keep = true;
    for (const Index3& k : out.breakage_centers) {
      if (g.distance_mm(p, k) <= gamma_mm) { keep = false; break; }
    }
    if (keep) out.breakage_centers.push_back(p);
  }
  return out;
}

BreakageSample simulate_breakage(const Volume& mask, double branch_fraction,
                                 std::pair<double, double> removal_range,
                                 std::uint64_t seed,
                                 const SkeletonTree* tree) {
  require_binary_mask(mask, "simulate_breakage mask");
  if (!(branch_fraction >= 0.0 && branch_fraction <= 1.0))
    throw DataError("simulate_breakage: branch_fraction must be in [0, 1]");
  const auto [lo, hi] = removal_range;
  if (!(lo > 0.0 && hi < 1.0 && lo <= hi))
    throw DataError("simulate_breakage: removal_range must satisfy 0 < lo <= hi < 1");

  SkeletonTree local;
  if (!tree) {
    local = skeletonize(mask);
    tree = &local;
  } else if (!tree->geom.same_grid(mask.geom())) {
    throw DataError("simulate_breakage: tree grid does not match mask grid");
  }

  // Peripheral = leaf branches other than the root; a chain needs at least
  // 4 voxels so an interior sub-segment can be carved while keeping both
  // chain ends.
  std::vector<std::int32_t> eligible;
  for (const auto& br : tree->branches)
    if (br.id != tree->root_branch_id && tree->is_leaf(br.id) &&
        br.voxels.size() >= 4)
      eligible.push_back(br.id);
  if (eligible.empty())
    throw DataError("simulate_breakage: mask has no peripheral branches");
  std::sort(eligible.begin(), eligible.end());

  Rng rng(seed);
  const std::size_t k = static_cast<std::size_t>(
      std::ceil(branch_fraction * static_cast<double>(eligible.size()) - 1e-12));
  auto pick = rng.sample_without_replacement<std::size_t>(eligible.size(),
                                                          std::min(k, eligible.size()));
  std::vector<std::int32_t> chosen;
  chosen.reserve(pick.size());
  for (auto idx : pick) chosen.push_back(eligible[idx]);
  std::sort(chosen.begin(), chosen.end());

  BreakageSample out;
  out.seed = seed;
  out.branch_fraction = branch_fraction;
  out.removal_range = removal_range;

  const auto& g = mask.geom();
  std::vector<std::uint8_t> removed_mark(g.voxel_count(), 0);
  for (std::int32_t id : chosen) {
    const auto& chain = tree->branch(id).voxels;
    const std::int64_t nvox = static_cast<std::int64_t>(chain.size());
    const double f = rng.uniform(lo, hi);
    std::int64_t count = std::llround(f * static_cast<double>(nvox));
    const auto cmin = static_cast<std::int64_t>(
        std::ceil(lo * static_cast<double>(nvox) - 1e-9));
    const auto cmax = static_cast<std::int64_t>(
        std::floor(hi * static_cast<double>(nvox) + 1e-9));
    count = std::clamp(count, cmin, cmax);
    count = std::clamp<std::int64_t>(count, 1, nvox - 2);
    const std::int64_t start =
        1 + static_cast<std::int64_t>(
                rng.uniform_below(static_cast<std::uint64_t>(nvox - count - 1)));
    for (std::int64_t i = start; i < start + count; ++i)
      removed_mark[g.index(chain[static_cast<std::size_t>(i)])] = 1;
    out.removed_branches.emplace_back(
        id, static_cast<double>(count) / static_cast<double>(nvox));
  }

  out.breakage_gt = Volume::label8(g);
  out.broken_mask = Volume::label8(g);
  auto gt = out.breakage_gt.u8();
  auto broken = out.broken_mask.u8();
  auto m = mask.u8();
  if (chosen.empty()) {
    std::copy(m.begin(), m.end(), broken.begin());
    return out;
  }

  // Volumetric carve: assign every mask voxel to its nearest skeleton voxel.
  // Removed sites carry their branch id, kept sites a shared id above all
  // branch ids, so exact keep/remove ties fall to the carve (smaller label)
  // and carved voxels stay attributable to a branch. Work on the mask's
  // bounding box.
  Index3 blo{g.dims[0], g.dims[1], g.dims[2]}, bhi{-1, -1, -1};
  for (std::int64_t i = 0; i < g.voxel_count(); ++i) {
    if (!m[i]) continue;
    const Index3 p = g.unindex(i);
    blo.x = std::min(blo.x, p.x); bhi.x = std::max(bhi.x, p.x);
    blo.y = std::min(blo.y, p.y); bhi.y = std::max(bhi.y, p.y);
    blo.z = std::min(blo.z, p.z); bhi.z = std::max(bhi.z, p.z);
  }
  VolumeGeometry sub;
  sub.dims = {bhi.x - blo.x + 1, bhi.y - blo.y + 1, bhi.z - blo.z + 1};
  sub.spacing = g.spacing;
  sub.origin = {g.origin[0] + blo.x * g.spacing[0],
                g.origin[1] + blo.y * g.spacing[1],
                g.origin[2] + blo.z * g.spacing[2]};
  const std::int32_t kept_label =
      static_cast<std::int32_t>(tree->branches.size()) + 1;
  std::vector<std::pair<std::int64_t, std::int32_t>> sites;
  for (const auto& br : tree->branches)
    for (const Index3& p : br.voxels) {
      const Index3 q{p.x - blo.x, p.y - blo.y, p.z - blo.z};
      sites.emplace_back(sub.index(q),
                         removed_mark[g.index(p)] ? br.id : kept_label);
    }
  auto nearest = nearest_labeled_site(sub, sites, /*spacing_aware=*/true);
  std::vector<std::int32_t> carve_branch(static_cast<std::size_t>(g.voxel_count()), 0);
  for (std::int64_t i = 0; i < g.voxel_count(); ++i) {
    if (!m[i]) continue;
    const Index3 p = g.unindex(i);
    const Index3 q{p.x - blo.x, p.y - blo.y, p.z - blo.z};
    const std::int32_t lab =
        nearest[static_cast<std::size_t>(sub.index(q))].label;
    if (lab != kept_label) {
      gt[i] = 1;
      carve_branch[static_cast<std::size_t>(i)] = lab;
    } else {
      broken[i] = 1;
    }
  }

  // The carve must actually detach each tip. Diagonal necks can survive a
  // thin carve; widen a leaking branch's carve (never eating kept chain
  // voxels) until its tip separates from the root component. Tips welded to
  // another tube by volumetric contact cannot be freed and are left as-is.
  std::vector<std::uint8_t> protected_vox(static_cast<std::size_t>(g.voxel_count()), 0);
  for (const auto& br : tree->branches)
    for (const Index3& p : br.voxels)
      if (!removed_mark[g.index(p)]) protected_vox[static_cast<std::size_t>(g.index(p))] = 1;
  const auto& nbr = neighbor_offsets(26);
  for (int round = 0; round < 3; ++round) {
    const auto cl = connected_components(out.broken_mask, 26);
    const std::int32_t main_comp = cl.labels[static_cast<std::size_t>(g.index(tree->root))];
    std::vector<std::int32_t> leaking;
    for (const auto& [id, frac] : out.removed_branches) {
      const Index3 tip = tree->branch(id).voxels.back();
      if (cl.labels[static_cast<std::size_t>(g.index(tip))] == main_comp)
        leaking.push_back(id);
    }
    if (leaking.empty()) break;
    for (const std::int32_t id : leaking) {
      std::vector<std::int64_t> grow;
      for (std::int64_t i = 0; i < g.voxel_count(); ++i) {
        if (carve_branch[static_cast<std::size_t>(i)] != id) continue;
        const Index3 p = g.unindex(i);
        for (const auto& d : nbr) {
          const Index3 q{p.x + d.x, p.y + d.y, p.z + d.z};
          if (!g.contains(q)) continue;
          const std::int64_t j = g.index(q);
          if (broken[j] && !protected_vox[static_cast<std::size_t>(j)])
            grow.push_back(j);
        }
      }
      for (const std::int64_t j : grow) {
        broken[j] = 0;
        gt[j] = 1;
        carve_branch[static_cast<std::size_t>(j)] = id;
      }
    }
  }
  return out;
}

nlohmann::json breakage_manifest_json(const BreakageSample& sample) {
  nlohmann::json j;
  j["seed"] = sample.seed;
  j["branch_fraction"] = sample.branch_fraction;
  j["removal_range"] = {sample.removal_range.first, sample.removal_range.second};
  j["removed_branches"] = nlohmann::json::array();
  for (const auto& [id, frac] : sample.removed_branches)
    j["removed_branches"].push_back({{"id", id}, {"fraction", frac}});
  return j;
}

std::vector<ConnectorPatchRequest> sample_patches(const AttentionMap& attention,
                                                  const Volume& ct,
                                                  const Volume& label,
                                                  int jitter_vox,
                                                  std::uint64_t seed) {
  const auto& g = attention.normalized.geom();
  require_same_grid(attention.normalized.geom(), ct.geom(), "sample_patches attention/ct");
  require_same_grid(attention.normalized.geom(), label.geom(), "sample_patches attention/label");
  if (ct.kind() != ElementKind::Hu16)
    throw DataError("sample_patches: ct must be hu16");
  require_binary_mask(label, "sample_patches label");
  if (jitter_vox < 0)
    throw DataError("sample_patches: jitter must be non-negative");

  auto hu = ct.i16();
  auto attn = attention.normalized.f32();
  auto lab = label.u8();

  Rng rng(seed);
  std::vector<ConnectorPatchRequest> out;
  out.reserve(attention.breakage_centers.size());
  for (const Index3& c : attention.breakage_centers) {
    const int jx = rng.uniform_int(-jitter_vox, jitter_vox);
    const int jy = rng.uniform_int(-jitter_vox, jitter_vox);
    const int jz = rng.uniform_int(-jitter_vox, jitter_vox);
    ConnectorPatchRequest req;
    req.patch_origin = {c.x + jx - kPatchEdge / 2, c.y + jy - kPatchEdge / 2,
                        c.z + jz - kPatchEdge / 2};
    VolumeGeometry pg;
    pg.dims = {kPatchEdge, kPatchEdge, kPatchEdge};
    pg.spacing = g.spacing;
    pg.origin = {g.origin[0] + req.patch_origin.x * g.spacing[0],
                 g.origin[1] + req.patch_origin.y * g.spacing[1],
                 g.origin[2] + req.patch_origin.z * g.spacing[2]};
    req.ct_patch = Volume::hu16(pg, -1024);
    req.attn_patch = Volume::real32(pg, 0.0f);
    req.label_patch = Volume::label8(pg, 0);
    auto pct = req.ct_patch.i16();
    auto pattn = req.attn_patch.f32();
    auto plab = req.label_patch.u8();
    for (int z = 0; z < kPatchEdge; ++z)
      for (int y = 0; y < kPatchEdge; ++y)
        for (int x = 0; x < kPatchEdge; ++x) {
          const Index3 p{req.patch_origin.x + x, req.patch_origin.y + y,
                         req.patch_origin.z + z};
          if (!g.contains(p)) continue;
          const std::int64_t src = g.index(p);
          const std::int64_t dst = pg.index(x, y, z);
          pct[dst] = hu[src];
          pattn[dst] = attn[src];
          plab[dst] = lab[src];
        }
    out.push_back(std::move(req));
  }
  return out;
}

Volume connect_geometric(const ConnectorPatchRequest& request) {
  const auto& g = request.label_patch.geom();
  require_same_grid(request.label_patch.geom(), request.ct_patch.geom(), "connector patches");
  require_same_grid(request.label_patch.geom(), request.attn_patch.geom(), "connector patches");
  require_binary_mask(request.label_patch, "connector label patch");

  Volume fill = Volume::label8(g);
  auto cl = connected_components(request.label_patch, 26);
  if (cl.count < 2) return fill;

  auto lab = request.label_patch.u8();
  auto hu = request.ct_patch.i16();
  auto attn = request.attn_patch.f32();
  const std::int64_t n = g.voxel_count();

  // Mutually closest pair of components: the foreground voxel with the
  // smallest distance to a component other than its own, and the closest
  // voxel of that other component.
  auto field = second_component_distance(cl, /*spacing_aware=*/true);
  std::int64_t v0 = -1;
  double best = kDistInf;
  for (std::int64_t i = 0; i < n; ++i) {
    if (!lab[i]) continue;
    if (field.second_sq[i] < best) { best = field.second_sq[i]; v0 = i; }
  }
  if (v0 < 0 || !dist_defined(best))
    throw InternalError("connect_geometric: no inter-component distance");
  const std::int32_t other = field.second_label[static_cast<std::size_t>(v0)];
  const Index3 p0 = g.unindex(v0);
  std::int64_t v1 = -1;
  double best_mm = kDistInf;
  for (std::int64_t i = 0; i < n; ++i) {
    if (cl.labels[static_cast<std::size_t>(i)] != other) continue;
    const double d = g.distance_mm(p0, g.unindex(i));
    if (d < best_mm) { best_mm = d; v1 = i; }
  }
  if (v1 < 0) throw InternalError("connect_geometric: runner-up component lost");

  // Min-cost path from v0 to v1; entering a voxel costs the step length
  // scaled up for soft-tissue HU and down for high breakage attention.
  const auto nbr = neighbor_offsets(26);
  std::array<double, 26> step_mm{};
  std::array<std::int64_t, 26> off{};
  for (std::size_t k = 0; k < nbr.size(); ++k) {
    const auto& d = nbr[k];
    step_mm[k] = std::sqrt(
        d.x * d.x * g.spacing[0] * g.spacing[0] +
        d.y * d.y * g.spacing[1] * g.spacing[1] +
        d.z * d.z * g.spacing[2] * g.spacing[2]);
    off[k] = d.x + static_cast<std::int64_t>(g.dims[0]) *
                       (d.y + static_cast<std::int64_t>(g.dims[1]) * d.z);
  }
  auto enter_cost = [&](std::int64_t i) {
    const double hu_pen = std::max(0.0, (static_cast<double>(hu[i]) + 900.0) / 200.0);
    const double a = std::clamp(static_cast<double>(attn[i]), 0.0, 1.0);
    return (1.0 + hu_pen) * (2.0 - a);
  };
  std::vector<double> dist(static_cast<std::size_t>(n), kDistInf);
  std::vector<std::int64_t> par(static_cast<std::size_t>(n), -1);
  using Node = std::pair<double, std::int64_t>;
  std::priority_queue<Node, std::vector<Node>, std::greater<>> heap;
  dist[static_cast<std::size_t>(v0)] = 0.0;
  heap.emplace(0.0, v0);
  while (!heap.empty()) {
    auto [d, u] = heap.top();
    heap.pop();
    if (d > dist[static_cast<std::size_t>(u)]) continue;
    if (u == v1) break;
    const Index3 pu = g.unindex(u);
    for (std::size_t k = 0; k < nbr.size(); ++k) {
      const Index3 q{pu.x + nbr[k].x, pu.y + nbr[k].y, pu.z + nbr[k].z};
      if (!g.contains(q)) continue;
      const std::int64_t w = u + off[k];
      const double nd = d + step_mm[k] * enter_cost(w);
      if (nd < dist[static_cast<std::size_t>(w)]) {
        dist[static_cast<std::size_t>(w)] = nd;
        par[static_cast<std::size_t>(w)] = u;
        heap.emplace(nd, w);
      }
    }
  }
  if (!dist_defined(dist[static_cast<std::size_t>(v1)]))
    throw InternalError("connect_geometric: endpoints not connectable");
  std::vector<std::int64_t> path;
  for (std::int64_t v = v1; v != -1; v = par[static_cast<std::size_t>(v)])
    path.push_back(v);

  auto interior = interior_distance_mm(request.label_patch);
  const double min_sp = std::min({g.spacing[0], g.spacing[1], g.spacing[2]});
  const double radius =
      std::max(std::min(interior[static_cast<std::size_t>(v0)],
                        interior[static_cast<std::size_t>(v1)]),
               min_sp);

  std::vector<std::uint8_t> path_mask(static_cast<std::size_t>(n), 0);
  for (std::int64_t v : path) path_mask[static_cast<std::size_t>(v)] = 1;
  auto tube_sq = squared_distance_to_sites(g, path_mask.data(),
                                           /*spacing_aware=*/true);
  auto out = fill.u8();
  const double r2 = radius * radius + 1e-12;
  for (std::int64_t i = 0; i < n; ++i)
    if (tube_sq[static_cast<std::size_t>(i)] <= r2 && !lab[i]) out[i] = 1;
  return fill;
}

Volume reconnect_mask(const Volume& mask, const Volume& ct,
                      const Connector& connector, double gamma_mm) {
  require_binary_mask(mask, "reconnect mask");
  require_same_grid(mask.geom(), ct.geom(), "reconnect mask/ct");
  if (ct.kind() != ElementKind::Hu16)
    throw DataError("reconnect_mask: ct must be hu16");
  if (foreground_count(mask) == 0) return Volume::label8(mask.geom());

  auto attention = breakage_attention(mask, gamma_mm);
  auto patches = sample_patches(attention, ct, mask, /*jitter_vox=*/0, /*seed=*/0);
  Volume merged = Volume::label8(mask.geom());
  auto dst = merged.u8();
  auto src = mask.u8();
  std::copy(src.begin(), src.end(), dst.begin());
  const auto& g = mask.geom();
  for (const auto& patch : patches) {
    Volume filled = connector.connect(patch);
    require_same_grid(filled.geom(), patch.label_patch.geom(), "connector output");
    auto f = filled.u8();
    const auto& pg = filled.geom();
    for (int z = 0; z < pg.dims[2]; ++z)
      for (int y = 0; y < pg.dims[1]; ++y)
        for (int x = 0; x < pg.dims[0]; ++x) {
          if (!f[pg.index(x, y, z)]) continue;
          const Index3 p{patch.patch_origin.x + x, patch.patch_origin.y + y,
                         patch.patch_origin.z + z};
          if (g.contains(p)) dst[g.index(p)] = 1;
        }
  }
  return largest_component(merged);
}

Volume refine_pseudo_label(const Volume& pred, const Volume& ref,
                           const Volume& ct, const Connector& connector,
                           double gamma_mm) {
  require_binary_mask(pred, "refine pred");
  require_binary_mask(ref, "refine ref");
  require_same_grid(pred.geom(), ref.geom(), "refine pred/ref");
  require_same_grid(pred.geom(), ct.geom(), "refine pred/ct");
  Volume fused = Volume::label8(pred.geom());
  auto f = fused.u8();
  auto p = pred.u8();
  auto r = ref.u8();
  for (std::int64_t i = 0; i < pred.geom().voxel_count(); ++i)
    f[i] = (p[i] || r[i]) ? 1 : 0;
  return reconnect_mask(fused, ct, connector, gamma_mm);
}

}  // namespace airtopo
