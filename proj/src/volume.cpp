#include "airtopo/volume.hpp"

#include <cmath>

namespace airtopo {

const char* element_kind_name(ElementKind kind) {
  switch (kind) {
    case ElementKind::Label8:
      return "label8";
    case ElementKind::Hu16:
      return "hu16";
    case ElementKind::Real32:
      return "real32";
  }
  return "?";
}

double VolumeGeometry::distance_mm(const Index3& a, const Index3& b) const {
  const double dx = (a.x - b.x) * spacing[0];
  const double dy = (a.y - b.y) * spacing[1];
  const double dz = (a.z - b.z) * spacing[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

bool VolumeGeometry::same_grid(const VolumeGeometry& other) const {
  return dims == other.dims && spacing == other.spacing &&
         origin == other.origin;
}

void VolumeGeometry::validate() const {
  if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
    throw DataError("volume dims must be positive");
  if (spacing[0] <= 0.0 || spacing[1] <= 0.0 || spacing[2] <= 0.0)
    throw DataError("volume spacing must be strictly positive");
}

Volume::Volume(const VolumeGeometry& geom, ElementKind kind)
    : geom_(geom), kind_(kind) {
  geom_.validate();
}

Volume Volume::label8(const VolumeGeometry& geom, std::uint8_t fill) {
  Volume v(geom, ElementKind::Label8);
  v.data_ = std::vector<std::uint8_t>(
      static_cast<std::size_t>(geom.voxel_count()), fill);
  return v;
}

Volume Volume::hu16(const VolumeGeometry& geom, std::int16_t fill) {
  Volume v(geom, ElementKind::Hu16);
  v.data_ = std::vector<std::int16_t>(
      static_cast<std::size_t>(geom.voxel_count()), fill);
  return v;
}

Volume Volume::real32(const VolumeGeometry& geom, float fill) {
  Volume v(geom, ElementKind::Real32);
  v.data_ =
      std::vector<float>(static_cast<std::size_t>(geom.voxel_count()), fill);
  return v;
}

namespace {
[[noreturn]] void kind_mismatch(ElementKind want, ElementKind got) {
  throw InternalError(std::string("volume element kind mismatch: want ") +
                      element_kind_name(want) + ", got " +
                      element_kind_name(got));
}
}  // namespace

std::span<std::uint8_t> Volume::u8() {
  if (kind_ != ElementKind::Label8) kind_mismatch(ElementKind::Label8, kind_);
  return std::get<std::vector<std::uint8_t>>(data_);
}
std::span<const std::uint8_t> Volume::u8() const {
  if (kind_ != ElementKind::Label8) kind_mismatch(ElementKind::Label8, kind_);
  return std::get<std::vector<std::uint8_t>>(data_);
}
std::span<std::int16_t> Volume::i16() {
  if (kind_ != ElementKind::Hu16) kind_mismatch(ElementKind::Hu16, kind_);
  return std::get<std::vector<std::int16_t>>(data_);
}
std::span<const std::int16_t> Volume::i16() const {
  if (kind_ != ElementKind::Hu16) kind_mismatch(ElementKind::Hu16, kind_);
  return std::get<std::vector<std::int16_t>>(data_);
}
std::span<float> Volume::f32() {
  if (kind_ != ElementKind::Real32) kind_mismatch(ElementKind::Real32, kind_);
  return std::get<std::vector<float>>(data_);
}
std::span<const float> Volume::f32() const {
  if (kind_ != ElementKind::Real32) kind_mismatch(ElementKind::Real32, kind_);
  return std::get<std::vector<float>>(data_);
}

double Volume::at(std::int64_t i) const {
  switch (kind_) {
    case ElementKind::Label8:
      return u8()[static_cast<std::size_t>(i)];
    case ElementKind::Hu16:
      return i16()[static_cast<std::size_t>(i)];
    case ElementKind::Real32:
      return f32()[static_cast<std::size_t>(i)];
  }
  return 0.0;
}

std::size_t Volume::element_size() const {
  switch (kind_) {
    case ElementKind::Label8:
      return 1;
    case ElementKind::Hu16:
      return 2;
    case ElementKind::Real32:
      return 4;
  }
  return 0;
}

const void* Volume::raw_data() const {
  return std::visit([](const auto& v) -> const void* { return v.data(); },
                    data_);
}

void* Volume::raw_data() {
  return std::visit([](auto& v) -> void* { return v.data(); }, data_);
}

bool is_binary_mask(const Volume& v) {
  if (v.kind() != ElementKind::Label8) return false;
  for (std::uint8_t x : v.u8())
    if (x > 1) return false;
  return true;
}

void require_binary_mask(const Volume& v, const std::string& who) {
  if (!is_binary_mask(v))
    throw DataError(who + ": input mask must be a binary label8 volume");
}

std::int64_t foreground_count(const Volume& mask) {
  std::int64_t n = 0;
  for (std::uint8_t x : mask.u8())
    if (x) ++n;
  return n;
}

void require_same_grid(const VolumeGeometry& a, const VolumeGeometry& b,
                       const std::string& who) {
  if (!a.same_grid(b)) throw DataError(who + ": volumes are on different grids");
}

}  // namespace airtopo
