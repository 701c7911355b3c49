#include "airtopo/anatomy.hpp"

#include <nlohmann/json.hpp>

#include "airtopo/components.hpp"
#include "airtopo/error.hpp"

namespace airtopo {

const char* amc_class_name(std::uint8_t value) {
  switch (value) {
    case kAmcBackground: return "background";
    case kAmcLarge: return "L";
    case kAmcMedium: return "M";
    case kAmcSmall: return "S";
    default: throw InternalError("amc_class_name: value out of range");
  }
}

std::vector<std::uint8_t> amc_branch_classes(const SkeletonTree& tree,
                                             std::array<int, 2> cutoffs) {
  const int g_lm = cutoffs[0];
  const int g_ms = cutoffs[1];
  if (g_lm < 0 || g_ms < g_lm)
    throw DataError("generation cutoffs must satisfy 0 <= g_LM <= g_MS");
  std::vector<std::uint8_t> classes(tree.branches.size(), kAmcSmall);
  for (std::size_t i = 0; i < tree.branches.size(); ++i) {
    const int gen = tree.branches[i].generation;
    if (gen <= g_lm)
      classes[i] = kAmcLarge;
    else if (gen <= g_ms)
      classes[i] = kAmcMedium;
  }
  return classes;
}

AmcLabel decompose_amc(const Volume& mask, std::array<int, 2> cutoffs,
                       const SkeletonTree* tree, bool* multi_component) {
  require_binary_mask(mask, "decompose_amc mask");
  if (multi_component) {
    auto cl = connected_components(mask, 26);
    *multi_component = cl.count > 1;
  }
  SkeletonTree local;
  if (!tree) {
    local = skeletonize(mask);
    tree = &local;
  } else if (!tree->geom.same_grid(mask.geom())) {
    throw DataError("decompose_amc: tree grid does not match mask grid");
  }
  AmcLabel out;
  out.generation_cutoffs = cutoffs;
  out.volume = propagate_labels(*tree, amc_branch_classes(*tree, cutoffs), mask);
  return out;
}

Volume amc_to_binary(const AmcLabel& label) {
  if (label.volume.kind() != ElementKind::Label8)
    throw DataError("amc_to_binary expects a label8 volume");
  Volume out = Volume::label8(label.volume.geom());
  auto src = label.volume.u8();
  auto dst = out.u8();
  for (std::int64_t i = 0; i < label.volume.geom().voxel_count(); ++i)
    dst[i] = src[i] ? 1 : 0;
  return out;
}

nlohmann::json amc_sidecar_json(const AmcLabel& label) {
  nlohmann::json j;
  j["class_map"] = {{"1", "L"}, {"2", "M"}, {"3", "S"}};
  j["generation_cutoffs"] = {label.generation_cutoffs[0],
                             label.generation_cutoffs[1]};
  return j;
}

}  // namespace airtopo
