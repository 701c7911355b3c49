#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "airtopo/error.hpp"

namespace airtopo {

struct Index3 {
  int x = 0;
  int y = 0;
  int z = 0;

  friend bool operator==(const Index3&, const Index3&) = default;
};

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

enum class ElementKind : std::uint8_t { Label8, Hu16, Real32 };

const char* element_kind_name(ElementKind kind);

// Grid metadata shared by every volume flavor. Data is row-major with x
// fastest, matching the on-disk raw layout.
struct VolumeGeometry {
  std::array<int, 3> dims{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::array<double, 3> origin{0.0, 0.0, 0.0};

  std::int64_t voxel_count() const {
    return static_cast<std::int64_t>(dims[0]) * dims[1] * dims[2];
  }
  std::int64_t index(int x, int y, int z) const {
    return x + static_cast<std::int64_t>(dims[0]) *
                   (y + static_cast<std::int64_t>(dims[1]) * z);
  }
  std::int64_t index(const Index3& v) const { return index(v.x, v.y, v.z); }
  Index3 unindex(std::int64_t i) const {
    const int x = static_cast<int>(i % dims[0]);
    const std::int64_t rest = i / dims[0];
    return Index3{x, static_cast<int>(rest % dims[1]),
                  static_cast<int>(rest / dims[1])};
  }
  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims[0] && y < dims[1] &&
           z < dims[2];
  }
  bool contains(const Index3& v) const { return contains(v.x, v.y, v.z); }
  Vec3 to_mm(const Index3& v) const {
    return Vec3{origin[0] + v.x * spacing[0], origin[1] + v.y * spacing[1],
                origin[2] + v.z * spacing[2]};
  }
  // Physical distance between two voxel centers, in mm.
  double distance_mm(const Index3& a, const Index3& b) const;

  bool same_grid(const VolumeGeometry& other) const;
  void validate() const;  // throws DataError on nonpositive dims/spacing
};

// The universal 3D scalar grid: labels, Hounsfield units or real-valued maps.
// Storage is one of three concrete element types selected at construction.
class Volume {
 public:
  Volume() = default;

  static Volume label8(const VolumeGeometry& geom, std::uint8_t fill = 0);
  static Volume hu16(const VolumeGeometry& geom, std::int16_t fill = 0);
  static Volume real32(const VolumeGeometry& geom, float fill = 0.0f);

  ElementKind kind() const { return kind_; }
  const VolumeGeometry& geom() const { return geom_; }
  std::int64_t voxel_count() const { return geom_.voxel_count(); }

  std::span<std::uint8_t> u8();
  std::span<const std::uint8_t> u8() const;
  std::span<std::int16_t> i16();
  std::span<const std::int16_t> i16() const;
  std::span<float> f32();
  std::span<const float> f32() const;

  // Element value as double regardless of kind (slow path, for generic code).
  double at(std::int64_t i) const;

  std::size_t element_size() const;
  const void* raw_data() const;
  void* raw_data();

 private:
  Volume(const VolumeGeometry& geom, ElementKind kind);

  VolumeGeometry geom_;
  ElementKind kind_ = ElementKind::Label8;
  std::variant<std::vector<std::uint8_t>, std::vector<std::int16_t>,
               std::vector<float>>
      data_;
};

// Binary-mask helpers. A mask is a label8 volume holding only 0/1.
bool is_binary_mask(const Volume& v);
void require_binary_mask(const Volume& v, const std::string& who);
std::int64_t foreground_count(const Volume& mask);
void require_same_grid(const VolumeGeometry& a, const VolumeGeometry& b,
                       const std::string& who);

}  // namespace airtopo
