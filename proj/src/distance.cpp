#include "airtopo/distance.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "airtopo/error.hpp"
#include "airtopo/parallel.hpp"

namespace airtopo {

namespace {

std::int64_t line_count(const VolumeGeometry& g, int axis) {
  const std::int64_t nx = g.dims[0], ny = g.dims[1], nz = g.dims[2];
  switch (axis) {
    case 0: return ny * nz;
    case 1: return nx * nz;
    default: return nx * ny;
  }
}

void line_base_stride(const VolumeGeometry& g, int axis, std::int64_t li,
                      std::int64_t& base, std::int64_t& stride) {
  const std::int64_t nx = g.dims[0], ny = g.dims[1];
  if (axis == 0) {
    const std::int64_t y = li % ny, z = li / ny;
    base = nx * (y + ny * z);
    stride = 1;
  } else if (axis == 1) {
    const std::int64_t x = li % nx, z = li / nx;
    base = x + nx * ny * z;
    stride = nx;
  } else {
    base = li;  // li = x + nx*y
    stride = nx * ny;
  }
}

double axis_weight(const VolumeGeometry& g, int axis, bool spacing_aware) {
  if (!spacing_aware) return 1.0;
  return g.spacing[axis] * g.spacing[axis];
}

// Classic one-dimensional lower-envelope distance transform. f and d may
// alias distinct buffers only.
void dt_line(const double* f, int len, double w, double* d, int* hull,
             double* bound) {
  int k = 0;
  hull[0] = 0;
  bound[0] = -kDistInf;
  bound[1] = kDistInf;
  for (int q = 1; q < len; ++q) {
    double s;
    for (;;) {
      const int p = hull[k];
      s = ((f[q] - f[p]) / w + (double(q) * q - double(p) * p)) /
          (2.0 * (q - p));
      if (s <= bound[k] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    hull[k] = q;
    bound[k] = s;
    bound[k + 1] = kDistInf;
  }
  k = 0;
  for (int q = 0; q < len; ++q) {
    while (bound[k + 1] < q) ++k;
    const int p = hull[k];
    d[q] = f[p] + w * (double(q) - p) * (double(q) - p);
  }
}

struct Parab {
  int q;
  double h;
  std::int32_t lab;
};

// Lower envelope over parabolas with labels; ps must be sorted by vertex
// with unique vertices. Evaluates value and owning label at every cell.
void envelope_eval(const std::vector<Parab>& ps, double w, int len,
                   std::vector<double>& val, std::vector<std::int32_t>& lab,
                   std::vector<int>& hull, std::vector<double>& bound) {
  const int m = int(ps.size());
  hull.resize(std::max(m, 1));
  bound.resize(std::size_t(std::max(m, 1)) + 1);
  int k = 0;
  hull[0] = 0;
  bound[0] = -kDistInf;
  bound[1] = kDistInf;
  for (int i = 1; i < m; ++i) {
    double s;
    for (;;) {
      const Parab& a = ps[hull[k]];
      const Parab& b = ps[i];
      s = ((b.h - a.h) / w + (double(b.q) * b.q - double(a.q) * a.q)) /
          (2.0 * (b.q - a.q));
      if (s <= bound[k] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    hull[k] = i;
    bound[k] = s;
    bound[std::size_t(k) + 1] = kDistInf;
  }
  k = 0;
  for (int q = 0; q < len; ++q) {
    while (bound[std::size_t(k) + 1] < q) ++k;
    const Parab& p = ps[hull[k]];
    val[q] = p.h + w * (double(q) - p.q) * (double(q) - p.q);
    lab[q] = p.lab;
  }
}

}  // namespace

std::vector<double> squared_distance_to_sites(const VolumeGeometry& g,
                                              const std::uint8_t* site_mask,
                                              bool spacing_aware) {
  g.validate();
  const std::int64_t n = g.voxel_count();
  std::vector<double> field(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i)
    field[std::size_t(i)] = site_mask[i] ? 0.0 : kDistInf;

  for (int axis = 0; axis < 3; ++axis) {
    const double w = axis_weight(g, axis, spacing_aware);
    const int len = g.dims[axis];
    if (len < 2) continue;
    const std::int64_t lines = line_count(g, axis);
    parallel_chunks(lines, [&](std::int64_t lo, std::int64_t hi) {
      std::vector<double> f(static_cast<std::size_t>(len)), d(static_cast<std::size_t>(len));
      std::vector<int> hull(static_cast<std::size_t>(len));
      std::vector<double> bound(std::size_t(len) + 1);
      for (std::int64_t li = lo; li < hi; ++li) {
        std::int64_t base, stride;
        line_base_stride(g, axis, li, base, stride);
        for (int q = 0; q < len; ++q)
          f[std::size_t(q)] = field[std::size_t(base + stride * q)];
        dt_line(f.data(), len, w, d.data(), hull.data(), bound.data());
        for (int q = 0; q < len; ++q)
          field[std::size_t(base + stride * q)] = d[std::size_t(q)];
      }
    });
  }
  return field;
}

Volume euclidean_distance_map(const Volume& mask, bool spacing_aware) {
  require_binary_mask(mask, "euclidean_distance_map input");
  if (foreground_count(mask) == 0)
    throw DataError("euclidean_distance_map: mask has empty foreground");
  const auto sq =
      squared_distance_to_sites(mask.geom(), mask.u8().data(), spacing_aware);
  Volume out = Volume::real32(mask.geom());
  auto dst = out.f32();
  for (std::size_t i = 0; i < sq.size(); ++i)
    dst[i] = float(std::sqrt(sq[i]));
  return out;
}

std::vector<double> interior_distance_mm(const Volume& mask) {
  require_binary_mask(mask, "interior_distance_mm input");
  const VolumeGeometry& g = mask.geom();
  const std::int64_t n = g.voxel_count();
  auto src = mask.u8();
  std::vector<std::uint8_t> complement(static_cast<std::size_t>(n));
  bool any_bg = false;
  for (std::int64_t i = 0; i < n; ++i) {
    complement[std::size_t(i)] = src[std::size_t(i)] ? 0 : 1;
    any_bg |= !src[std::size_t(i)];
  }
  if (!any_bg)
    throw DataError("interior_distance_mm: mask covers the whole grid");
  auto sq = squared_distance_to_sites(g, complement.data(), true);
  std::vector<double> out(std::size_t(n), 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    if (src[std::size_t(i)]) out[std::size_t(i)] = std::sqrt(sq[std::size_t(i)]);
  return out;
}

std::vector<LabeledCandidate> nearest_labeled_site(
    const VolumeGeometry& g,
    const std::vector<std::pair<std::int64_t, std::int32_t>>& sites,
    bool spacing_aware) {
  g.validate();
  if (sites.empty())
    throw DataError("nearest_labeled_site: empty site list");
  const std::int64_t n = g.voxel_count();
  std::vector<LabeledCandidate> field(static_cast<std::size_t>(n));
  for (const auto& [idx, lab] : sites) {
    if (idx < 0 || idx >= n)
      throw InternalError("nearest_labeled_site: site index out of range");
    LabeledCandidate& c = field[std::size_t(idx)];
    if (c.dist_sq > 0.0 || lab < c.label) c = {0.0, lab};
  }

  for (int axis = 0; axis < 3; ++axis) {
    const double w = axis_weight(g, axis, spacing_aware);
    const int len = g.dims[axis];
    if (len < 2) continue;
    const std::int64_t lines = line_count(g, axis);
    parallel_chunks(lines, [&](std::int64_t lo, std::int64_t hi) {
      std::vector<LabeledCandidate> in(static_cast<std::size_t>(len)),
          out(static_cast<std::size_t>(len));
      for (std::int64_t li = lo; li < hi; ++li) {
        std::int64_t base, stride;
        line_base_stride(g, axis, li, base, stride);
        bool any = false;
        for (int q = 0; q < len; ++q) {
          in[std::size_t(q)] = field[std::size_t(base + stride * q)];
          any |= dist_defined(in[std::size_t(q)].dist_sq);
        }
        if (!any) continue;  // line stays undefined
        for (int p = 0; p < len; ++p) {
          LabeledCandidate best = in[std::size_t(p)];
          for (int o = 1;; ++o) {
            const double lift = w * double(o) * o;
            if (lift > best.dist_sq) break;
            for (const int q : {p - o, p + o}) {
              if (q < 0 || q >= len) continue;
              const LabeledCandidate& c = in[std::size_t(q)];
              if (!dist_defined(c.dist_sq)) continue;
              const double d = c.dist_sq + lift;
              if (d < best.dist_sq ||
                  (d == best.dist_sq && c.label < best.label))
                best = {d, c.label};
            }
            if (p - o < 0 && p + o >= len) break;
          }
          out[std::size_t(p)] = best;
        }
        for (int q = 0; q < len; ++q)
          field[std::size_t(base + stride * q)] = out[std::size_t(q)];
      }
    });
  }
  return field;
}

SecondDistanceField second_component_distance(const ComponentLabeling& cl,
                                              bool spacing_aware) {
  const VolumeGeometry& g = cl.geom;
  const std::int64_t n = g.voxel_count();
  SecondDistanceField fld;
  fld.first_sq.assign(std::size_t(n), kDistInf);
  fld.second_sq.assign(std::size_t(n), kDistInf);
  fld.first_label.assign(std::size_t(n), -1);
  fld.second_label.assign(std::size_t(n), -1);
  for (std::int64_t i = 0; i < n; ++i) {
    if (cl.labels[std::size_t(i)] > 0) {  // 0 is background
      fld.first_sq[std::size_t(i)] = 0.0;
      fld.first_label[std::size_t(i)] = cl.labels[std::size_t(i)];
    }
  }

  for (int axis = 0; axis < 3; ++axis) {
    const double w = axis_weight(g, axis, spacing_aware);
    const int len = g.dims[axis];
    if (len < 2) continue;
    const std::int64_t lines = line_count(g, axis);
    parallel_chunks(lines, [&](std::int64_t lo, std::int64_t hi) {
      std::vector<Parab> parabs, filtered;
      std::vector<Parab> per_vertex;
      std::vector<double> val(static_cast<std::size_t>(len)), val2(static_cast<std::size_t>(len));
      std::vector<std::int32_t> lab(static_cast<std::size_t>(len)), lab2(static_cast<std::size_t>(len));
      std::vector<std::int32_t> labels_here;
      std::vector<int> hull;
      std::vector<double> bound;
      for (std::int64_t li = lo; li < hi; ++li) {
        std::int64_t base, stride;
        line_base_stride(g, axis, li, base, stride);

        parabs.clear();
        for (int q = 0; q < len; ++q) {
          const std::size_t i = std::size_t(base + stride * q);
          if (dist_defined(fld.first_sq[i]))
            parabs.push_back({q, fld.first_sq[i], fld.first_label[i]});
          if (dist_defined(fld.second_sq[i]))
            parabs.push_back({q, fld.second_sq[i], fld.second_label[i]});
        }
        if (parabs.empty()) continue;

        // Global winner: reduce to the lowest parabola per vertex first.
        per_vertex.clear();
        for (const Parab& p : parabs) {
          if (!per_vertex.empty() && per_vertex.back().q == p.q) {
            Parab& b = per_vertex.back();
            if (p.h < b.h || (p.h == b.h && p.lab < b.lab)) b = p;
          } else {
            per_vertex.push_back(p);
          }
        }
        envelope_eval(per_vertex, w, len, val, lab, hull, bound);

        labels_here.clear();
        for (const Parab& p : parabs) labels_here.push_back(p.lab);
        std::sort(labels_here.begin(), labels_here.end());
        labels_here.erase(std::unique(labels_here.begin(), labels_here.end()),
                          labels_here.end());

        if (labels_here.size() < 2) {
          for (int q = 0; q < len; ++q) {
            const std::size_t i = std::size_t(base + stride * q);
            fld.first_sq[i] = val[std::size_t(q)];
            fld.first_label[i] = lab[std::size_t(q)];
            fld.second_sq[i] = kDistInf;
            fld.second_label[i] = -1;
          }
          continue;
        }

        // Runner-up per cell: envelope over parabolas of every label other
        // than the cell's winner, computed once per distinct winner label.
        for (const std::int32_t ell : labels_here) {
          bool wanted = false;
          for (int q = 0; q < len && !wanted; ++q)
            wanted = lab[std::size_t(q)] == ell;
          if (!wanted) continue;
          filtered.clear();
          for (const Parab& p : parabs) {
            if (p.lab == ell) continue;
            if (!filtered.empty() && filtered.back().q == p.q) {
              Parab& b = filtered.back();
              if (p.h < b.h || (p.h == b.h && p.lab < b.lab)) b = p;
            } else {
              filtered.push_back(p);
            }
          }
          envelope_eval(filtered, w, len, val2, lab2, hull, bound);
          for (int q = 0; q < len; ++q) {
            if (lab[std::size_t(q)] != ell) continue;
            const std::size_t i = std::size_t(base + stride * q);
            fld.second_sq[i] = val2[std::size_t(q)];
            fld.second_label[i] = lab2[std::size_t(q)];
          }
        }
        for (int q = 0; q < len; ++q) {
          const std::size_t i = std::size_t(base + stride * q);
          fld.first_sq[i] = val[std::size_t(q)];
          fld.first_label[i] = lab[std::size_t(q)];
        }
      }
    });
  }

  // Clamp undefined runners-up back to the sentinel.
  for (std::size_t i = 0; i < fld.second_sq.size(); ++i) {
    if (!dist_defined(fld.second_sq[i])) {
      fld.second_sq[i] = kDistInf;
      fld.second_label[i] = -1;
    }
    if (!dist_defined(fld.first_sq[i])) {
      fld.first_sq[i] = kDistInf;
      fld.first_label[i] = -1;
    }
  }
  return fld;
}

namespace {

Volume ball_threshold(const Volume& mask, int radius_vox, bool outside,
                      const char* what) {
  require_binary_mask(mask, what);
  if (radius_vox < 0) throw DataError(std::string(what) + ": negative radius");
  Volume out = mask;  // copy
  if (radius_vox == 0) return out;
  const VolumeGeometry& g = mask.geom();
  const std::int64_t n = g.voxel_count();
  auto src = mask.u8();
  std::vector<std::uint8_t> sites(std::size_t(n), 0);
  bool any = false;
  for (std::int64_t i = 0; i < n; ++i) {
    const bool fg = src[std::size_t(i)] != 0;
    sites[std::size_t(i)] = (fg != outside) ? 1 : 0;  // outside: complement
    any |= sites[std::size_t(i)] != 0;
  }
  auto dst = out.u8();
  if (!any) {
    // Dilating empty stays empty; eroding an all-foreground grid keeps it.
    return out;
  }
  const auto sq = squared_distance_to_sites(g, sites.data(), false);
  const double r2 = double(radius_vox) * radius_vox;
  for (std::int64_t i = 0; i < n; ++i) {
    const bool close = sq[std::size_t(i)] <= r2;
    dst[std::size_t(i)] = outside ? (close ? 0 : 1) : (close ? 1 : 0);
  }
  return out;
}

}  // namespace

Volume dilate(const Volume& mask, int radius_vox) {
  return ball_threshold(mask, radius_vox, false, "dilate");
}

Volume erode(const Volume& mask, int radius_vox) {
  return ball_threshold(mask, radius_vox, true, "erode");
}

}  // namespace airtopo
