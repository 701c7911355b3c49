#include <doctest.h>

#include <cmath>

#include "airtopo/volume.hpp"

using namespace airtopo;

namespace {
VolumeGeometry small_geom() {
  VolumeGeometry g;
  g.dims = {4, 3, 2};
  g.spacing = {0.5, 1.0, 2.0};
  g.origin = {-1.0, 0.0, 3.0};
  return g;
}
}  // namespace

TEST_CASE("geometry indexing is row-major x-fastest") {
  const auto g = small_geom();
  CHECK(g.voxel_count() == 24);
  CHECK(g.index(0, 0, 0) == 0);
  CHECK(g.index(1, 0, 0) == 1);
  CHECK(g.index(0, 1, 0) == 4);
  CHECK(g.index(0, 0, 1) == 12);
  for (std::int64_t i = 0; i < g.voxel_count(); ++i) {
    const Index3 v = g.unindex(i);
    CHECK(g.index(v) == i);
    CHECK(g.contains(v));
  }
  CHECK(!g.contains(4, 0, 0));
  CHECK(!g.contains(0, -1, 0));
}

TEST_CASE("geometry physical mapping") {
  const auto g = small_geom();
  const Vec3 p = g.to_mm({1, 2, 1});
  CHECK(p.x == doctest::Approx(-0.5));
  CHECK(p.y == doctest::Approx(2.0));
  CHECK(p.z == doctest::Approx(5.0));
  CHECK(g.distance_mm({0, 0, 0}, {1, 2, 1}) ==
        doctest::Approx(std::sqrt(0.25 + 4.0 + 4.0)));
}

TEST_CASE("geometry validation rejects nonpositive extents") {
  auto g = small_geom();
  g.dims[1] = 0;
  CHECK_THROWS_AS(g.validate(), DataError);
  g = small_geom();
  g.spacing[2] = -1.0;
  CHECK_THROWS_AS(g.validate(), DataError);
  CHECK_NOTHROW(small_geom().validate());
}

TEST_CASE("volume factories and typed access") {
  const auto g = small_geom();
  Volume a = Volume::label8(g, 1);
  Volume b = Volume::hu16(g, -1024);
  Volume c = Volume::real32(g, 0.25f);
  CHECK(a.kind() == ElementKind::Label8);
  CHECK(b.kind() == ElementKind::Hu16);
  CHECK(c.kind() == ElementKind::Real32);
  CHECK(a.u8().size() == 24);
  CHECK(b.i16()[5] == -1024);
  CHECK(c.f32()[23] == 0.25f);
  CHECK(a.at(0) == 1.0);
  CHECK(b.at(0) == -1024.0);
  CHECK(c.at(0) == doctest::Approx(0.25));
  CHECK_THROWS_AS(a.i16(), InternalError);
  CHECK_THROWS_AS(b.f32(), InternalError);
  CHECK_THROWS_AS(c.u8(), InternalError);
  CHECK(a.element_size() == 1);
  CHECK(b.element_size() == 2);
  CHECK(c.element_size() == 4);
}

TEST_CASE("binary mask helpers") {
  const auto g = small_geom();
  Volume m = Volume::label8(g);
  CHECK(is_binary_mask(m));
  CHECK(foreground_count(m) == 0);
  m.u8()[3] = 1;
  m.u8()[7] = 1;
  CHECK(is_binary_mask(m));
  CHECK(foreground_count(m) == 2);
  m.u8()[9] = 2;
  CHECK(!is_binary_mask(m));
  CHECK_THROWS_AS(require_binary_mask(m, "test"), DataError);
  CHECK_THROWS_AS(require_binary_mask(Volume::hu16(g), "test"), DataError);
}

TEST_CASE("grid equality") {
  const auto g = small_geom();
  auto h = g;
  CHECK(g.same_grid(h));
  h.spacing[0] = 0.6;
  CHECK(!g.same_grid(h));
  CHECK_THROWS_AS(require_same_grid(g, h, "test"), DataError);
}
