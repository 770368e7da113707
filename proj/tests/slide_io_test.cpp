#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "cytogate/png_io.hpp"
#include "cytogate/slide_io.hpp"
#include "support.hpp"

using namespace cytogate;
using testing_support::error_kind;
using testing_support::TempDir;

namespace {

SlideManifest small_manifest(int w, int h, std::vector<std::string> channels) {
  SlideManifest m;
  m.slide_id = "fx";
  m.patient_id = "p1";
  m.site = Site::terminal_ileum;
  m.disease = Disease::diseased;
  m.width_px = w;
  m.height_px = h;
  m.microns_per_pixel = 0.32;
  m.channels = std::move(channels);
  return m;
}

IntensityGrid checkerboard(int w, int h) {
  IntensityGrid g(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) g(x, y) = static_cast<std::uint16_t>(((x + y) % 2) ? 1000 + x : 7 * y);
  }
  return g;
}

}  // namespace

TEST(SlideBundle, OpensFixtureWithManifestDimensions) {
  TempDir dir;
  write_bundle(dir.path(), small_manifest(64, 64, {"DAPI", "Muc2", "CD45"}),
               {{"DAPI", IntensityGrid(64, 64, 1)}, {"Muc2", IntensityGrid(64, 64, 2)},
                {"CD45", IntensityGrid(64, 64, 3)}},
               LabelGrid(64, 64, 0));
  const auto b = SlideBundle::open(dir.path());
  EXPECT_EQ(b.width(), 64);
  EXPECT_EQ(b.height(), 64);
  EXPECT_EQ(b.manifest().channels.size(), 3u);
  EXPECT_EQ(b.manifest().site, Site::terminal_ileum);
  EXPECT_EQ(b.manifest().bit_depth, 16);
}

TEST(SlideBundle, ManifestKeysAreExactlyTheDocumentedSet) {
  const auto j = small_manifest(4, 4, {"a"}).to_json();
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  EXPECT_EQ(keys, (std::vector<std::string>{"bit_depth", "channel_files", "channels", "disease",
                                            "height_px", "instance_map", "microns_per_pixel",
                                            "patient_id", "site", "slide_id", "width_px"}));
}

TEST(SlideBundle, RasterSmallerThanManifestIsDimensionMismatch) {
  TempDir dir;
  write_bundle(dir.path(), small_manifest(64, 64, {"DAPI"}), {{"DAPI", IntensityGrid(64, 64, 1)}},
               LabelGrid(64, 64, 0));
  png::write_gray(dir / "DAPI.png", IntensityGrid(32, 32, 1), 16);
  EXPECT_EQ(error_kind([&] { SlideBundle::open(dir.path()); }), ErrorKind::dimension_mismatch);
}

TEST(SlideBundle, CorruptOrMissingManifestIsRejected) {
  TempDir dir;
  EXPECT_EQ(error_kind([&] { SlideBundle::open(dir.path()); }), ErrorKind::io);
  std::ofstream(dir / "manifest.json") << "{\"slide_id\": ";
  EXPECT_EQ(error_kind([&] { SlideBundle::open(dir.path()); }), ErrorKind::format);
}

TEST(SlideBundle, UnknownBitDepthIsRejected) {
  auto m = small_manifest(4, 4, {"a"});
  m.bit_depth = 12;
  m.channel_files["a"] = "a.png";
  EXPECT_EQ(error_kind([&] { m.validate(); }), ErrorKind::format);
}

TEST(SlideBundle, ExtraChannelsAreHarmless) {
  TempDir dir;
  std::vector<std::string> names;
  std::vector<ChannelRaster> rasters;
  for (int i = 0; i < 27; ++i) {
    names.push_back("ch" + std::to_string(i));
    rasters.push_back({names.back(), IntensityGrid(8, 8, static_cast<std::uint16_t>(i))});
  }
  write_bundle(dir.path(), small_manifest(8, 8, names), rasters, LabelGrid(8, 8, 0));
  const auto b = SlideBundle::open(dir.path());
  EXPECT_EQ(b.manifest().channels.size(), 27u);
  EXPECT_EQ(b.read_tile("ch16", {0, 0, 8, 8})(3, 3), 16);
}

TEST(ReadTile, ConstantChannelGivesConstantTile) {
  TempDir dir;
  write_bundle(dir.path(), small_manifest(40, 30, {"c"}), {{"c", IntensityGrid(40, 30, 37)}},
               LabelGrid(40, 30, 0));
  const auto b = SlideBundle::open(dir.path());
  for (const TileRequest req : {TileRequest{0, 0, 40, 30}, TileRequest{5, 7, 9, 3}}) {
    const auto t = b.read_tile("c", req);
    for (int y = 0; y < t.height(); ++y)
      for (int x = 0; x < t.width(); ++x) EXPECT_EQ(t(x, y), 37);
  }
}

TEST(ReadTile, CornerTileIsZeroFilledOutsideImage) {
  TempDir dir;
  write_bundle(dir.path(), small_manifest(16, 16, {"c"}), {{"c", IntensityGrid(16, 16, 9)}},
               LabelGrid(16, 16, 0));
  const auto b = SlideBundle::open(dir.path());
  const auto t = b.read_tile("c", {12, 12, 8, 8});
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) EXPECT_EQ(t(x, y), (x < 4 && y < 4) ? 9 : 0) << x << "," << y;
  }
  const auto neg = b.read_tile("c", {-2, -2, 4, 4});
  EXPECT_EQ(neg(0, 0), 0);
  EXPECT_EQ(neg(3, 3), 9);
}

TEST(ReadTile, CheckerboardCornerReadsStoredValues) {
  TempDir dir;
  const auto board = checkerboard(10, 10);
  write_bundle(dir.path(), small_manifest(10, 10, {"c"}), {{"c", board}}, LabelGrid(10, 10, 0));
  const auto t = SlideBundle::open(dir.path()).read_tile("c", {0, 0, 2, 2});
  EXPECT_EQ(t(0, 0), board(0, 0));
  EXPECT_EQ(t(1, 0), board(1, 0));
  EXPECT_EQ(t(0, 1), board(0, 1));
  EXPECT_EQ(t(1, 1), board(1, 1));
}

TEST(ReadTile, ErrorsForUnknownChannelAndDisjointRequest) {
  TempDir dir;
  write_bundle(dir.path(), small_manifest(8, 8, {"c"}), {{"c", IntensityGrid(8, 8, 1)}},
               LabelGrid(8, 8, 0));
  const auto b = SlideBundle::open(dir.path());
  EXPECT_EQ(error_kind([&] { b.read_tile("nope", {0, 0, 2, 2}); }), ErrorKind::unknown_channel);
  EXPECT_EQ(error_kind([&] { b.read_tile("c", {8, 0, 2, 2}); }), ErrorKind::out_of_bounds);
  EXPECT_EQ(error_kind([&] { b.read_tile("c", {-4, -4, 4, 4}); }), ErrorKind::out_of_bounds);
}

TEST(ReadTile, AnyTilingReassemblesTheRaster) {
  TempDir dir;
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> v(0, 65535);
  IntensityGrid img(37, 23);
  LabelGrid labels(37, 23);
  for (int y = 0; y < 23; ++y) {
    for (int x = 0; x < 37; ++x) {
      img(x, y) = static_cast<std::uint16_t>(v(rng));
      labels(x, y) = static_cast<std::uint32_t>(v(rng)) * 70000u;
    }
  }
  write_bundle(dir.path(), small_manifest(37, 23, {"c"}), {{"c", img}}, labels);
  const auto b = SlideBundle::open(dir.path());
  for (int tile : {1, 5, 8, 64}) {
    IntensityGrid rebuilt(37, 23);
    LabelGrid rebuilt_labels(37, 23);
    for (int ty = 0; ty < 23; ty += tile) {
      for (int tx = 0; tx < 37; tx += tile) {
        const auto t = b.read_tile("c", {tx, ty, tile, tile});
        const auto l = b.read_instance_tile({tx, ty, tile, tile});
        for (int y = 0; y < tile && ty + y < 23; ++y) {
          for (int x = 0; x < tile && tx + x < 37; ++x) {
            rebuilt(tx + x, ty + y) = t(x, y);
            rebuilt_labels(tx + x, ty + y) = l(x, y);
          }
        }
      }
    }
    EXPECT_EQ(rebuilt, img) << "tile " << tile;
    EXPECT_EQ(rebuilt_labels, labels) << "tile " << tile;
  }
}

TEST(SlideBundle, RoundTripIsBitIdentical) {
  TempDir a, b;
  const auto board = checkerboard(33, 17);
  LabelGrid labels(33, 17, 0);
  labels(3, 4) = 0xfedcba98u;
  labels(10, 10) = 70000;
  auto m = small_manifest(33, 17, {"c", "d"});
  write_bundle(a.path(), m, {{"c", board}, {"d", IntensityGrid(33, 17, 65535)}}, labels);
  const auto first = SlideBundle::open(a.path());
  write_bundle(b.path(), first.manifest(),
               {{"c", first.read_channel("c")}, {"d", first.read_channel("d")}},
               first.read_instance_map());
  const auto second = SlideBundle::open(b.path());
  EXPECT_EQ(second.read_channel("c"), board);
  EXPECT_EQ(second.read_channel("d"), IntensityGrid(33, 17, 65535));
  EXPECT_EQ(second.read_instance_map(), labels);
  EXPECT_EQ(second.manifest().to_json(), first.manifest().to_json());
}

TEST(SlideBundle, EightBitRastersRoundTrip) {
  TempDir dir;
  auto m = small_manifest(5, 5, {"c"});
  m.bit_depth = 8;
  IntensityGrid g(5, 5);
  for (int i = 0; i < 25; ++i) g.data()[i] = static_cast<std::uint16_t>(i * 10);
  write_bundle(dir.path(), m, {{"c", g}}, LabelGrid(5, 5, 0));
  const auto b = SlideBundle::open(dir.path());
  EXPECT_EQ(b.manifest().max_value(), 255u);
  EXPECT_EQ(b.read_channel("c"), g);
}

TEST(MergeChannels, SumsClampsAndCommutes) {
  TempDir dir;
  IntensityGrid dapi(2, 1), muc2(2, 1);
  dapi(0, 0) = 100;
  muc2(0, 0) = 50;
  dapi(1, 0) = 65000;
  muc2(1, 0) = 60000;
  write_bundle(dir.path(), small_manifest(2, 1, {"DAPI", "Muc2"}), {{"DAPI", dapi}, {"Muc2", muc2}},
               LabelGrid(2, 1, 0));
  const auto b = SlideBundle::open(dir.path());
  const auto ab = merge_channels_sum(b, {"DAPI", "Muc2"});
  const auto ba = merge_channels_sum(b, {"Muc2", "DAPI"});
  EXPECT_EQ(ab.pixels(0, 0), 150);
  EXPECT_EQ(ab.pixels(1, 0), 65535);
  EXPECT_EQ(ab.pixels, ba.pixels);
  EXPECT_EQ(merge_channels_sum(b, {"DAPI"}).pixels, dapi);
  EXPECT_EQ(error_kind([&] { merge_channels_sum(b, {}); }), ErrorKind::invalid_argument);
}

TEST(SlideBundle, RawInstanceMapIsLittleEndian) {
  TempDir dir;
  LabelGrid g(2, 1);
  g(0, 0) = 0x01020304u;
  g(1, 0) = 70000;
  write_instance_raw(dir / "m.raw", g);
  std::ifstream in(dir / "m.raw", std::ios::binary);
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  EXPECT_EQ(bytes[0], 0x04);
  EXPECT_EQ(bytes[3], 0x01);
  EXPECT_EQ(read_instance_raw(dir / "m.raw", 2, 1), g);
  EXPECT_EQ(error_kind([&] { read_instance_raw(dir / "m.raw", 3, 1); }), ErrorKind::dimension_mismatch);
}
