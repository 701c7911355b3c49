#include "airtopo/components.hpp"

#include <algorithm>
#include <numeric>

namespace airtopo {

const std::vector<Index3>& neighbor_offsets(int adjacency) {
  static const std::vector<Index3> n6 = [] {
    std::vector<Index3> v;
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          if (std::abs(dx) + std::abs(dy) + std::abs(dz) == 1)
            v.push_back({dx, dy, dz});
    return v;
  }();
  static const std::vector<Index3> n26 = [] {
    std::vector<Index3> v;
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          if (dx || dy || dz) v.push_back({dx, dy, dz});
    return v;
  }();
  if (adjacency == 6) return n6;
  if (adjacency == 26) return n26;
  throw DataError("adjacency must be 6 or 26");
}

ComponentLabeling connected_components(const Volume& mask, int adjacency) {
  require_binary_mask(mask, "connected_components");
  const auto& offs = neighbor_offsets(adjacency);
  const auto& g = mask.geom();
  const auto data = mask.u8();
  const std::int64_t n = g.voxel_count();

  ComponentLabeling cl;
  cl.geom = g;
  cl.labels.assign(static_cast<std::size_t>(n), 0);

  std::vector<std::int64_t> stack;
  for (std::int64_t seed = 0; seed < n; ++seed) {
    if (!data[static_cast<std::size_t>(seed)] ||
        cl.labels[static_cast<std::size_t>(seed)])
      continue;
    const std::int32_t id = ++cl.count;
    std::int64_t size = 0;
    stack.push_back(seed);
    cl.labels[static_cast<std::size_t>(seed)] = id;
    while (!stack.empty()) {
      const std::int64_t cur = stack.back();
      stack.pop_back();
      ++size;
      const Index3 v = g.unindex(cur);
      for (const Index3& o : offs) {
        const int x = v.x + o.x, y = v.y + o.y, z = v.z + o.z;
        if (!g.contains(x, y, z)) continue;
        const std::int64_t ni = g.index(x, y, z);
        if (data[static_cast<std::size_t>(ni)] &&
            !cl.labels[static_cast<std::size_t>(ni)]) {
          cl.labels[static_cast<std::size_t>(ni)] = id;
          stack.push_back(ni);
        }
      }
    }
    cl.sizes.push_back(size);
  }

  cl.by_size_desc.resize(static_cast<std::size_t>(cl.count));
  std::iota(cl.by_size_desc.begin(), cl.by_size_desc.end(), 1);
  std::stable_sort(cl.by_size_desc.begin(), cl.by_size_desc.end(),
                   [&](std::int32_t a, std::int32_t b) {
                     return cl.sizes[static_cast<std::size_t>(a - 1)] >
                            cl.sizes[static_cast<std::size_t>(b - 1)];
                   });
  return cl;
}

Volume largest_component(const Volume& mask, bool* was_empty) {
  const ComponentLabeling cl = connected_components(mask, 26);
  Volume out = Volume::label8(mask.geom());
  if (cl.count == 0) {
    if (was_empty) *was_empty = true;
    return out;
  }
  if (was_empty) *was_empty = false;
  // IDs are raster first-encounter ordered and the sort is stable, so equal
  // sizes resolve to the component seen first.
  const std::int32_t keep = cl.largest_id();
  auto dst = out.u8();
  for (std::size_t i = 0; i < cl.labels.size(); ++i)
    if (cl.labels[i] == keep) dst[i] = 1;
  return out;
}

}  // namespace airtopo
