#include "airtopo/mhd_io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace airtopo {

static_assert(std::endian::native == std::endian::little,
              "raw payloads are little-endian; big-endian hosts unsupported");

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Shortest decimal form that round-trips exactly.
std::string fmt_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename T>
std::array<T, 3> parse_triple(const std::string& value, const std::string& key) {
  std::istringstream ss(value);
  std::array<T, 3> out{};
  for (int i = 0; i < 3; ++i) {
    if (!(ss >> out[i]))
      throw DataError("mhd: malformed value for key " + key + ": '" + value + "'");
  }
  T extra;
  if (ss >> extra)
    throw DataError("mhd: expected 3 values for key " + key + ": '" + value + "'");
  return out;
}

}  // namespace

Volume read_volume(const std::filesystem::path& header_path) {
  std::ifstream hdr(header_path, std::ios::binary);
  if (!hdr)
    throw DataError("mhd: cannot open header " + header_path.string());

  std::map<std::string, std::string> keys;
  std::string line;
  while (std::getline(hdr, line)) {
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw DataError("mhd: malformed header line '" + line + "' in " +
                      header_path.string());
    const std::string key = trim(line.substr(0, eq));
    if (key.empty())
      throw DataError("mhd: malformed header line '" + line + "'");
    keys[key] = trim(line.substr(eq + 1));
    // ElementDataFile terminates the header; with LOCAL the payload
    // follows immediately after this line.
    if (key == "ElementDataFile") break;
  }
  const auto payload_start = hdr.tellg();

  auto require = [&](const std::string& key) -> const std::string& {
    auto it = keys.find(key);
    if (it == keys.end())
      throw DataError("mhd: missing required header key " + key);
    return it->second;
  };

  if (require("ObjectType") != "Image")
    throw DataError("mhd: ObjectType must be 'Image'");
  if (require("NDims") != "3") throw DataError("mhd: NDims must be 3");
  if (auto it = keys.find("ElementByteOrderMSB");
      it != keys.end() && it->second != "False")
    throw DataError("mhd: only little-endian payloads supported");
  if (auto it = keys.find("CompressedData");
      it != keys.end() && it->second != "False")
    throw DataError("mhd: compressed payloads not supported");

  VolumeGeometry geom;
  geom.dims = parse_triple<int>(require("DimSize"), "DimSize");
  if (auto it = keys.find("ElementSpacing"); it != keys.end())
    geom.spacing = parse_triple<double>(it->second, "ElementSpacing");
  if (auto it = keys.find("Offset"); it != keys.end())
    geom.origin = parse_triple<double>(it->second, "Offset");
  geom.validate();

  const std::string& etype = require("ElementType");
  Volume v;
  if (etype == "MET_UCHAR")
    v = Volume::label8(geom);
  else if (etype == "MET_SHORT")
    v = Volume::hu16(geom);
  else if (etype == "MET_FLOAT")
    v = Volume::real32(geom);
  else
    throw DataError("mhd: unsupported ElementType " + etype);

  const std::uint64_t want =
      static_cast<std::uint64_t>(v.voxel_count()) * v.element_size();
  const std::string& datafile = require("ElementDataFile");
  if (datafile == "LOCAL") {
    hdr.clear();
    hdr.seekg(0, std::ios::end);
    const auto file_end = hdr.tellg();
    const auto avail =
        static_cast<std::uint64_t>(file_end - payload_start);
    if (avail != want)
      throw DataError("mhd: payload size mismatch in " +
                      header_path.string() + ": header implies " +
                      std::to_string(want) + " bytes, file has " +
                      std::to_string(avail));
    hdr.seekg(payload_start);
    hdr.read(static_cast<char*>(v.raw_data()),
             static_cast<std::streamsize>(want));
    if (!hdr) throw DataError("mhd: short read from " + header_path.string());
    return v;
  }
  const auto raw_path = header_path.parent_path() / datafile;
  std::ifstream raw(raw_path, std::ios::binary);
  if (!raw) throw DataError("mhd: cannot open raw payload " + raw_path.string());
  raw.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::uint64_t>(raw.tellg());
  raw.seekg(0, std::ios::beg);
  if (file_size != want)
    throw DataError("mhd: payload size mismatch in " + raw_path.string() +
                    ": header implies " + std::to_string(want) +
                    " bytes, file has " + std::to_string(file_size));
  raw.read(static_cast<char*>(v.raw_data()),
           static_cast<std::streamsize>(want));
  if (!raw) throw DataError("mhd: short read from " + raw_path.string());
  return v;
}

void write_volume(const Volume& v, const std::filesystem::path& header_path) {
  const char* etype = nullptr;
  switch (v.kind()) {
    case ElementKind::Label8:
      etype = "MET_UCHAR";
      break;
    case ElementKind::Hu16:
      etype = "MET_SHORT";
      break;
    case ElementKind::Real32:
      etype = "MET_FLOAT";
      break;
  }

  auto raw_path = header_path;
  raw_path.replace_extension(".raw");

  const auto& g = v.geom();
  std::ostringstream hdr;
  hdr << "ObjectType = Image\n";
  hdr << "NDims = 3\n";
  hdr << "DimSize = " << g.dims[0] << " " << g.dims[1] << " " << g.dims[2]
      << "\n";
  hdr << "ElementSpacing = " << fmt_double(g.spacing[0]) << " "
      << fmt_double(g.spacing[1]) << " " << fmt_double(g.spacing[2]) << "\n";
  hdr << "Offset = " << fmt_double(g.origin[0]) << " "
      << fmt_double(g.origin[1]) << " " << fmt_double(g.origin[2]) << "\n";
  hdr << "ElementType = " << etype << "\n";
  hdr << "ElementByteOrderMSB = False\n";
  hdr << "ElementDataFile = " << raw_path.filename().string() << "\n";

  std::ofstream hf(header_path);
  if (!hf) throw DataError("mhd: cannot write header " + header_path.string());
  hf << hdr.str();
  hf.flush();
  if (!hf) throw DataError("mhd: failed writing header " + header_path.string());

  std::ofstream rf(raw_path, std::ios::binary);
  if (!rf) throw DataError("mhd: cannot write payload " + raw_path.string());
  rf.write(static_cast<const char*>(v.raw_data()),
           static_cast<std::streamsize>(
               static_cast<std::uint64_t>(v.voxel_count()) * v.element_size()));
  rf.flush();
  if (!rf) throw DataError("mhd: failed writing payload " + raw_path.string());
}

}  // namespace airtopo
