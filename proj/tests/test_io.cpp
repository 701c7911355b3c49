#include <doctest.h>

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "airtopo/mhd_io.hpp"
#include "airtopo/rng.hpp"

using namespace airtopo;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("airtopo_io_" + std::to_string(std::rand()) +
            std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

VolumeGeometry geom() {
  VolumeGeometry g;
  g.dims = {5, 4, 3};
  g.spacing = {0.7, 0.7, 1.25};
  g.origin = {-10.0, 2.5, 0.0};
  return g;
}

}  // namespace

TEST_CASE("metaimage round-trip preserves payload and grid for all kinds") {
  TempDir tmp;
  Rng rng(7);

  Volume lab = Volume::label8(geom());
  for (auto& v : lab.u8()) v = std::uint8_t(rng.uniform_below(4));
  Volume hu = Volume::hu16(geom());
  for (auto& v : hu.i16()) v = std::int16_t(rng.uniform_int(-1200, 600));
  Volume re = Volume::real32(geom());
  for (auto& v : re.f32()) v = float(rng.uniform(-5.0, 5.0));

  const Volume* vols[] = {&lab, &hu, &re};
  const char* names[] = {"lab.mhd", "hu.mhd", "re.mhd"};
  for (int i = 0; i < 3; ++i) {
    const fs::path p = tmp.path / names[i];
    write_volume(*vols[i], p);
    CHECK(fs::exists(p));
    CHECK(fs::exists(tmp.path / (fs::path(names[i]).stem().string() + ".raw")));
    const Volume back = read_volume(p);
    CHECK(back.kind() == vols[i]->kind());
    CHECK(back.geom().same_grid(vols[i]->geom()));
    for (std::int64_t j = 0; j < back.voxel_count(); ++j)
      CHECK(back.at(j) == vols[i]->at(j));
  }
}

TEST_CASE("metaimage header has the documented shape") {
  TempDir tmp;
  Volume v = Volume::hu16(geom(), -1000);
  const fs::path p = tmp.path / "vol.mhd";
  write_volume(v, p);
  std::ifstream in(p);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 8);
  CHECK(lines[0] == "ObjectType = Image");
  CHECK(lines[1] == "NDims = 3");
  CHECK(lines[2] == "DimSize = 5 4 3");
  CHECK(lines[3].rfind("ElementSpacing = 0.7", 0) == 0);
  CHECK(lines[4].rfind("Offset = -10 2.5 0", 0) == 0);
  CHECK(lines[5] == "ElementType = MET_SHORT");
  CHECK(lines[6] == "ElementByteOrderMSB = False");
  CHECK(lines[7] == "ElementDataFile = vol.raw");
}

TEST_CASE("metaimage reader rejects malformed input") {
  TempDir tmp;
  CHECK_THROWS_AS(read_volume(tmp.path / "missing.mhd"), DataError);

  auto write_header = [&](const std::string& text, const std::string& name) {
    std::ofstream out(tmp.path / name);
    out << text;
  };

  // payload too short for the declared grid
  write_header(
      "ObjectType = Image\nNDims = 3\nDimSize = 4 4 4\n"
      "ElementSpacing = 1 1 1\nOffset = 0 0 0\nElementType = MET_UCHAR\n"
      "ElementByteOrderMSB = False\nElementDataFile = short.raw\n",
      "short.mhd");
  {
    std::ofstream raw(tmp.path / "short.raw", std::ios::binary);
    raw << "abc";
  }
  CHECK_THROWS_AS(read_volume(tmp.path / "short.mhd"), DataError);

  write_header(
      "ObjectType = Image\nNDims = 3\nDimSize = 1 1 1\n"
      "ElementSpacing = 1 1 1\nOffset = 0 0 0\nElementType = MET_DOUBLE\n"
      "ElementByteOrderMSB = False\nElementDataFile = t.raw\n",
      "badtype.mhd");
  CHECK_THROWS_AS(read_volume(tmp.path / "badtype.mhd"), DataError);

  write_header(
      "ObjectType = Image\nNDims = 3\nDimSize = 1 1 1\n"
      "ElementSpacing = 1 1 1\nOffset = 0 0 0\nElementType = MET_UCHAR\n"
      "ElementByteOrderMSB = True\nElementDataFile = t.raw\n",
      "bigendian.mhd");
  CHECK_THROWS_AS(read_volume(tmp.path / "bigendian.mhd"), DataError);

  write_header("ObjectType = Image\nNDims = 3\nno equals sign here\n",
               "garbled.mhd");
  CHECK_THROWS_AS(read_volume(tmp.path / "garbled.mhd"), DataError);

  write_header(
      "ObjectType = Image\nNDims = 2\nDimSize = 1 1\n"
      "ElementSpacing = 1 1\nOffset = 0 0\nElementType = MET_UCHAR\n"
      "ElementByteOrderMSB = False\nElementDataFile = t.raw\n",
      "flat.mhd");
  CHECK_THROWS_AS(read_volume(tmp.path / "flat.mhd"), DataError);
}

TEST_CASE("reader accepts LOCAL payloads written by other tools") {
  TempDir tmp;
  std::ofstream out(tmp.path / "local.mhd", std::ios::binary);
  out << "ObjectType = Image\nNDims = 3\nDimSize = 2 1 1\n"
         "ElementSpacing = 1 1 1\nOffset = 0 0 0\nElementType = MET_UCHAR\n"
         "ElementByteOrderMSB = False\nElementDataFile = LOCAL\n";
  out.put(char(1));
  out.put(char(0));
  out.close();
  const Volume v = read_volume(tmp.path / "local.mhd");
  CHECK(v.u8()[0] == 1);
  CHECK(v.u8()[1] == 0);
}
