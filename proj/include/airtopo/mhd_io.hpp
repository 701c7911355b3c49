#pragma once

#include <filesystem>

#include "airtopo/volume.hpp"

namespace airtopo {

// MetaImage (.mhd + .raw) reader/writer. Payloads are row-major, x fastest,
// little-endian; compressed payloads are not supported.
Volume read_volume(const std::filesystem::path& header_path);
void write_volume(const Volume& v, const std::filesystem::path& header_path);

}  // namespace airtopo
