#include "airtopo/skeleton.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <queue>

#include <nlohmann/json.hpp>

#include "airtopo/components.hpp"
#include "airtopo/distance.hpp"
#include "airtopo/error.hpp"

namespace airtopo {

namespace {

struct NeighborTable {
  std::array<Index3, 26> delta;
  std::array<std::int64_t, 26> index_off;
  std::array<double, 26> step_mm;
};

NeighborTable make_neighbors(const VolumeGeometry& g) {
  NeighborTable t;
  const auto& offs = neighbor_offsets(26);
  for (std::size_t i = 0; i < offs.size(); ++i) {
    const Index3& d = offs[i];
    t.delta[i] = d;
    t.index_off[i] =
        d.x + std::int64_t(g.dims[0]) * (d.y + std::int64_t(g.dims[1]) * d.z);
    const double dx = d.x * g.spacing[0], dy = d.y * g.spacing[1],
                 dz = d.z * g.spacing[2];
    t.step_mm[i] = std::sqrt(dx * dx + dy * dy + dz * dz);
  }
  return t;
}

bool chebyshev_adjacent(const Index3& a, const Index3& b) {
  const int dx = std::abs(a.x - b.x), dy = std::abs(a.y - b.y),
            dz = std::abs(a.z - b.z);
  return (dx | dy | dz) != 0 && dx <= 1 && dy <= 1 && dz <= 1;
}

// Remove interior voxels whose removal keeps the chain 26-connected
// (diagonal shortcuts Dijkstra sometimes leaves behind). `front` is the
// skeleton voxel the path attaches to; it stays outside the result.
void taut_path(std::vector<Index3>& path, const Index3& front) {
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t k = 0; k + 1 < path.size(); ++k) {
      const Index3& prev = (k == 0) ? front : path[k - 1];
      if (chebyshev_adjacent(prev, path[k + 1])) {
        path.erase(path.begin() + std::ptrdiff_t(k));
        changed = true;
        break;
      }
    }
  }
}

using HeapItem = std::pair<double, std::int64_t>;
using MinHeap =
    std::priority_queue<HeapItem, std::vector<HeapItem>, std::greater<>>;

}  // namespace

std::int64_t SkeletonTree::node_count() const {
  std::int64_t n = 0;
  for (const auto& b : branches) n += std::int64_t(b.voxels.size());
  return n;
}

std::vector<Index3> SkeletonTree::all_voxels() const {
  std::vector<Index3> out;
  out.reserve(std::size_t(node_count()));
  for (const auto& b : branches)
    out.insert(out.end(), b.voxels.begin(), b.voxels.end());
  return out;
}

const SkeletonBranch& SkeletonTree::branch(std::int32_t id) const {
  if (id < 1 || std::size_t(id) > branches.size())
    throw InternalError("SkeletonTree: branch id out of range");
  return branches[std::size_t(id) - 1];
}

bool SkeletonTree::is_leaf(std::int32_t id) const {
  for (const auto& b : branches)
    if (b.parent == id) return false;
  return true;
}

SkeletonTree skeletonize(const Volume& mask,
                         const std::optional<Index3>& root_hint) {
  require_binary_mask(mask, "skeletonize input");
  if (foreground_count(mask) == 0)
    throw DataError("skeletonize: empty mask");
  const VolumeGeometry& g = mask.geom();
  if (root_hint) {
    if (!g.contains(*root_hint) ||
        mask.u8()[std::size_t(g.index(*root_hint))] == 0)
      throw DataError("skeletonize: root_hint outside the mask");
  }

  const Volume lc = largest_component(mask);
  const auto fg = lc.u8();
  const std::int64_t n = g.voxel_count();
  if (root_hint && fg[std::size_t(g.index(*root_hint))] == 0)
    throw DataError("skeletonize: root_hint not in the largest component");

  const std::vector<double> interior = interior_distance_mm(lc);
  const NeighborTable nb = make_neighbors(g);

  // Root: the deepest voxel of the top tenth of axial slices (airway masks
  // enter from the top), falling back to the globally deepest voxel.
  std::int64_t root_idx = -1;
  if (root_hint) {
    root_idx = g.index(*root_hint);
  } else {
    const int slab = std::max(1, g.dims[2] / 10);
    const std::int64_t slab_begin =
        g.index(0, 0, g.dims[2] - slab);
    double best = 0.0;
    for (std::int64_t i = slab_begin; i < n; ++i)
      if (fg[std::size_t(i)] && interior[std::size_t(i)] > best) {
        best = interior[std::size_t(i)];
        root_idx = i;
      }
    if (root_idx < 0) {
      for (std::int64_t i = 0; i < n; ++i)
        if (fg[std::size_t(i)] && interior[std::size_t(i)] > best) {
          best = interior[std::size_t(i)];
          root_idx = i;
        }
    }
  }

  // Geodesic (within-mask shortest path, mm) distance from the root.
  std::vector<double> geo(std::size_t(n), kDistInf);
  {
    MinHeap heap;
    geo[std::size_t(root_idx)] = 0.0;
    heap.push({0.0, root_idx});
    while (!heap.empty()) {
      const auto [d, u] = heap.top();
      heap.pop();
      if (d > geo[std::size_t(u)]) continue;
      const Index3 uc = g.unindex(u);
      for (std::size_t k = 0; k < nb.delta.size(); ++k) {
        const Index3 vc{uc.x + nb.delta[k].x, uc.y + nb.delta[k].y,
                        uc.z + nb.delta[k].z};
        if (!g.contains(vc)) continue;
        const std::int64_t v = u + nb.index_off[k];
        if (!fg[std::size_t(v)]) continue;
        const double cand = d + nb.step_mm[k];
        if (cand < geo[std::size_t(v)]) {
          geo[std::size_t(v)] = cand;
          heap.push({cand, v});
        }
      }
    }
  }

  // Endpoint candidates: local maxima of geodesic distance, farthest first.
  std::vector<std::int64_t> cands;
  for (std::int64_t i = 0; i < n; ++i) {
    if (!fg[std::size_t(i)] || !dist_defined(geo[std::size_t(i)])) continue;
    const Index3 c = g.unindex(i);
    bool is_max = true;
    for (std::size_t k = 0; k < nb.delta.size() && is_max; ++k) {
      const Index3 vc{c.x + nb.delta[k].x, c.y + nb.delta[k].y,
                      c.z + nb.delta[k].z};
      if (!g.contains(vc)) continue;
      const std::int64_t v = i + nb.index_off[k];
      if (fg[std::size_t(v)] && geo[std::size_t(v)] > geo[std::size_t(i)])
        is_max = false;
    }
    if (is_max) cands.push_back(i);
  }
  std::sort(cands.begin(), cands.end(), [&](std::int64_t a, std::int64_t b) {
    if (geo[std::size_t(a)] != geo[std::size_t(b)])
      return geo[std::size_t(a)] > geo[std::size_t(b)];
    return a < b;
  });

  // Min-cost field grown outward from the skeleton; entering voxel v costs
  // step_mm * 1/(1 + depth(v)^2), so optimal paths follow tube axes.
  std::vector<double> enter_cost(std::size_t(n), 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    if (fg[std::size_t(i)])
      enter_cost[std::size_t(i)] =
          1.0 / (1.0 + interior[std::size_t(i)] * interior[std::size_t(i)]);

  std::vector<double> dist(std::size_t(n), kDistInf);
  std::vector<std::int64_t> par(std::size_t(n), -2);
  std::vector<std::uint8_t> in_skel(std::size_t(n), 0);
  std::vector<std::int64_t> skel_list;
  MinHeap heap;

  auto add_seed = [&](std::int64_t v) {
    in_skel[std::size_t(v)] = 1;
    skel_list.push_back(v);
    dist[std::size_t(v)] = 0.0;
    par[std::size_t(v)] = -1;
    heap.push({0.0, v});
  };
  auto drain = [&] {
    while (!heap.empty()) {
      const auto [d, u] = heap.top();
      heap.pop();
      if (d > dist[std::size_t(u)]) continue;
      const Index3 uc = g.unindex(u);
      for (std::size_t k = 0; k < nb.delta.size(); ++k) {
        const Index3 vc{uc.x + nb.delta[k].x, uc.y + nb.delta[k].y,
                        uc.z + nb.delta[k].z};
        if (!g.contains(vc)) continue;
        const std::int64_t v = u + nb.index_off[k];
        if (!fg[std::size_t(v)]) continue;
        const double cand =
            d + nb.step_mm[k] * enter_cost[std::size_t(v)];
        if (cand < dist[std::size_t(v)]) {
          dist[std::size_t(v)] = cand;
          par[std::size_t(v)] = u;
          heap.push({cand, v});
        }
      }
    }
  };

  add_seed(root_idx);
  drain();

  const double min_sp =
      std::min({g.spacing[0], g.spacing[1], g.spacing[2]});
  for (const std::int64_t c : cands) {
    if (in_skel[std::size_t(c)]) continue;
    // Suppression against the current skeleton: a candidate within twice
    // the local skeleton radius is a rim artifact of an already-traced tip.
    const Index3 cc = g.unindex(c);
    double near_d = kDistInf;
    std::int64_t near_s = -1;
    for (const std::int64_t s : skel_list) {
      const double dd = g.distance_mm(cc, g.unindex(s));
      if (dd < near_d) {
        near_d = dd;
        near_s = s;
      }
    }
    const double radius =
        std::max(interior[std::size_t(near_s)], min_sp);
    if (near_d <= 2.0 * radius) continue;

    std::vector<Index3> path;
    std::int64_t v = c;
    while (par[std::size_t(v)] != -1) {
      if (par[std::size_t(v)] == -2)
        throw InternalError("skeletonize: candidate unreachable");
      path.push_back(g.unindex(v));
      v = par[std::size_t(v)];
    }
    std::reverse(path.begin(), path.end());
    // Candidates sit on the mask surface; walk the tip back onto the medial
    // axis (drop the strictly-shallowing tail) so skeleton ends keep the
    // local tube radius and cap-rim candidates fall inside suppression.
    while (path.size() > 1 &&
           interior[std::size_t(g.index(path.back()))] <
               interior[std::size_t(g.index(path[path.size() - 2]))])
      path.pop_back();
    taut_path(path, g.unindex(v));
    for (const Index3& p : path) {
      const std::int64_t pi = g.index(p);
      if (!in_skel[std::size_t(pi)]) add_seed(pi);
    }
    drain();
  }

  std::vector<Index3> voxels;
  voxels.reserve(skel_list.size());
  for (const std::int64_t s : skel_list) voxels.push_back(g.unindex(s));
  return parse_branches(g, voxels, g.unindex(root_idx), &interior);
}

SkeletonTree parse_branches(const VolumeGeometry& geom,
                            const std::vector<Index3>& skeleton_voxels,
                            const Index3& root,
                            const std::vector<double>* interior_mm) {
  geom.validate();
  if (skeleton_voxels.empty())
    throw DataError("parse_branches: empty skeleton");
  const std::int64_t n = geom.voxel_count();
  if (interior_mm && std::int64_t(interior_mm->size()) != n)
    throw InternalError("parse_branches: interior field size mismatch");

  std::vector<std::uint8_t> present(std::size_t(n), 0);
  std::int64_t distinct = 0;
  for (const Index3& v : skeleton_voxels) {
    if (!geom.contains(v))
      throw DataError("parse_branches: skeleton voxel outside the grid");
    const std::int64_t i = geom.index(v);
    if (!present[std::size_t(i)]) {
      present[std::size_t(i)] = 1;
      ++distinct;
    }
  }
  if (!geom.contains(root) || !present[std::size_t(geom.index(root))])
    throw DataError("parse_branches: root not on the skeleton");

  const NeighborTable nb = make_neighbors(geom);
  std::vector<std::uint8_t> visited(std::size_t(n), 0);

  SkeletonTree tree;
  tree.geom = geom;
  tree.root = root;
  tree.root_branch_id = 1;

  struct Pending {
    std::int64_t start;
    std::int32_t parent;
  };
  std::vector<Pending> stack{{geom.index(root), 0}};
  std::int64_t visited_count = 0;

  while (!stack.empty()) {
    const Pending item = stack.back();
    stack.pop_back();
    if (visited[std::size_t(item.start)]) continue;

    SkeletonBranch br;
    br.id = std::int32_t(tree.branches.size()) + 1;
    br.parent = item.parent;
    br.generation =
        item.parent ? tree.branches[std::size_t(item.parent) - 1].generation + 1
                    : 0;

    std::int64_t v = item.start;
    visited[std::size_t(v)] = 1;
    ++visited_count;
    br.voxels.push_back(geom.unindex(v));
    for (;;) {
      const Index3 vc = geom.unindex(v);
      std::int64_t next = -1;
      int unvisited = 0;
      for (std::size_t k = 0; k < nb.delta.size(); ++k) {
        const Index3 w{vc.x + nb.delta[k].x, vc.y + nb.delta[k].y,
                       vc.z + nb.delta[k].z};
        if (!geom.contains(w)) continue;
        const std::int64_t wi = v + nb.index_off[k];
        if (!present[std::size_t(wi)] || visited[std::size_t(wi)]) continue;
        ++unvisited;
        if (next < 0) next = wi;
      }
      if (unvisited == 0) break;  // chain tip
      if (unvisited == 1) {
        v = next;
        visited[std::size_t(v)] = 1;
        ++visited_count;
        br.voxels.push_back(geom.unindex(v));
        continue;
      }
      // Junction: this voxel closes the parent chain; children start on
      // the far side, pushed so they pop in raster order.
      std::vector<std::int64_t> kids;
      for (std::size_t k = 0; k < nb.delta.size(); ++k) {
        const Index3 w{vc.x + nb.delta[k].x, vc.y + nb.delta[k].y,
                       vc.z + nb.delta[k].z};
        if (!geom.contains(w)) continue;
        const std::int64_t wi = v + nb.index_off[k];
        if (present[std::size_t(wi)] && !visited[std::size_t(wi)])
          kids.push_back(wi);
      }
      for (auto it = kids.rbegin(); it != kids.rend(); ++it)
        stack.push_back({*it, br.id});
      break;
    }

    for (std::size_t i = 0; i + 1 < br.voxels.size(); ++i)
      br.length_mm += geom.distance_mm(br.voxels[i], br.voxels[i + 1]);
    if (interior_mm && !br.voxels.empty()) {
      double acc = 0.0;
      for (const Index3& p : br.voxels)
        acc += (*interior_mm)[std::size_t(geom.index(p))];
      br.mean_radius_mm = acc / double(br.voxels.size());
    }
    tree.total_length_mm += br.length_mm;
    tree.branches.push_back(std::move(br));
  }

  if (visited_count != distinct)
    throw DataError("parse_branches: skeleton is not 26-connected");
  return tree;
}

Volume propagate_labels(const SkeletonTree& tree,
                        const std::vector<std::uint8_t>& branch_class,
                        const Volume& mask) {
  require_binary_mask(mask, "propagate_labels mask");
  require_same_grid(tree.geom, mask.geom(), "propagate_labels");
  if (tree.branches.empty())
    throw DataError("propagate_labels: empty tree");
  if (branch_class.size() != tree.branches.size())
    throw DataError("propagate_labels: need exactly one class per branch");
  for (const std::uint8_t c : branch_class)
    if (c < 1) throw DataError("propagate_labels: classes must be >= 1");

  const VolumeGeometry& g = mask.geom();
  Volume out = Volume::label8(g);
  const auto src = mask.u8();

  // Bounding box of the mask plus all skeleton sites: the feature
  // transform restricted to this box is exact for every voxel inside it.
  Index3 lo{g.dims[0], g.dims[1], g.dims[2]}, hi{-1, -1, -1};
  auto grow = [&](const Index3& p) {
    lo.x = std::min(lo.x, p.x);
    lo.y = std::min(lo.y, p.y);
    lo.z = std::min(lo.z, p.z);
    hi.x = std::max(hi.x, p.x);
    hi.y = std::max(hi.y, p.y);
    hi.z = std::max(hi.z, p.z);
  };
  for (std::int64_t i = 0; i < g.voxel_count(); ++i)
    if (src[std::size_t(i)]) grow(g.unindex(i));
  if (hi.x < 0) return out;  // empty mask: empty labeling
  for (const auto& b : tree.branches)
    for (const Index3& p : b.voxels) grow(p);

  VolumeGeometry sub;
  sub.dims = {hi.x - lo.x + 1, hi.y - lo.y + 1, hi.z - lo.z + 1};
  sub.spacing = g.spacing;

  std::vector<std::pair<std::int64_t, std::int32_t>> sites;
  for (const auto& b : tree.branches)
    for (const Index3& p : b.voxels)
      sites.push_back(
          {sub.index(p.x - lo.x, p.y - lo.y, p.z - lo.z), b.id});
  const auto field = nearest_labeled_site(sub, sites, true);

  auto dst = out.u8();
  for (std::int64_t i = 0; i < g.voxel_count(); ++i) {
    if (!src[std::size_t(i)]) continue;
    const Index3 p = g.unindex(i);
    const auto& cand = field[std::size_t(
        sub.index(p.x - lo.x, p.y - lo.y, p.z - lo.z))];
    if (cand.label < 1)
      throw InternalError("propagate_labels: unlabeled mask voxel");
    dst[std::size_t(i)] = branch_class[std::size_t(cand.label) - 1];
  }
  return out;
}

std::vector<double> skeleton_length_inside(const SkeletonTree& tree,
                                           const Volume& pred) {
  require_binary_mask(pred, "skeleton_length_inside pred");
  require_same_grid(tree.geom, pred.geom(), "skeleton_length_inside");
  const auto in = pred.u8();
  const VolumeGeometry& g = tree.geom;
  std::vector<double> covered(tree.branches.size(), 0.0);
  for (const auto& b : tree.branches) {
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < b.voxels.size(); ++i) {
      const bool a_in = in[std::size_t(g.index(b.voxels[i]))] != 0;
      const bool b_in = in[std::size_t(g.index(b.voxels[i + 1]))] != 0;
      if (a_in && b_in) acc += g.distance_mm(b.voxels[i], b.voxels[i + 1]);
    }
    covered[std::size_t(b.id) - 1] = acc;
  }
  return covered;
}

nlohmann::json skeleton_to_json(const SkeletonTree& tree) {
  nlohmann::json j;
  j["grid"] = {{"dims", tree.geom.dims},
               {"spacing", tree.geom.spacing},
               {"origin", tree.geom.origin}};
  j["root"] = {tree.root.x, tree.root.y, tree.root.z};
  j["root_branch_id"] = tree.root_branch_id;
  j["total_length_mm"] = tree.total_length_mm;
  auto arr = nlohmann::json::array();
  for (const auto& b : tree.branches) {
    nlohmann::json jb;
    jb["id"] = b.id;
    if (b.parent)
      jb["parent"] = b.parent;
    else
      jb["parent"] = nullptr;
    jb["generation"] = b.generation;
    auto vox = nlohmann::json::array();
    for (const Index3& v : b.voxels) vox.push_back({v.x, v.y, v.z});
    jb["voxels"] = std::move(vox);
    jb["length_mm"] = b.length_mm;
    jb["mean_radius_mm"] = b.mean_radius_mm;
    arr.push_back(std::move(jb));
  }
  j["branches"] = std::move(arr);
  return j;
}

SkeletonTree skeleton_from_json(const nlohmann::json& j) {
  try {
    SkeletonTree t;
    const auto& grid = j.at("grid");
    t.geom.dims = grid.at("dims").get<std::array<int, 3>>();
    t.geom.spacing = grid.at("spacing").get<std::array<double, 3>>();
    t.geom.origin = grid.at("origin").get<std::array<double, 3>>();
    t.geom.validate();
    const auto& r = j.at("root");
    t.root = Index3{r.at(0).get<int>(), r.at(1).get<int>(), r.at(2).get<int>()};
    t.root_branch_id = j.at("root_branch_id").get<std::int32_t>();
    t.total_length_mm = j.at("total_length_mm").get<double>();
    for (const auto& jb : j.at("branches")) {
      SkeletonBranch b;
      b.id = jb.at("id").get<std::int32_t>();
      b.parent = jb.at("parent").is_null() ? 0
               : jb.at("parent").get<std::int32_t>();
      b.generation = jb.at("generation").get<int>();
      for (const auto& v : jb.at("voxels"))
        b.voxels.push_back(Index3{v.at(0).get<int>(), v.at(1).get<int>(),
                                  v.at(2).get<int>()});
      b.length_mm = jb.at("length_mm").get<double>();
      b.mean_radius_mm = jb.at("mean_radius_mm").get<double>();
      if (b.id != std::int32_t(t.branches.size()) + 1)
        throw DataError("skeleton json: branch ids must be 1..N in order");
      t.branches.push_back(std::move(b));
    }
    if (t.branches.empty()) throw DataError("skeleton json: no branches");
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("skeleton json: ") + e.what());
  }
}

}  // namespace airtopo
