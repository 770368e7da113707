#include <algorithm>
#include <fstream>
#include <regex>
#include <sstream>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>

#include "cytogate/palette.hpp"
#include "cytogate/service.hpp"
#include "cytogate/synthetic.hpp"
#include "support.hpp"

using namespace cytogate;
using namespace cytogate::service;
using testing_support::TempDir;

namespace {

/// Three 10x10 instances side by side whose Muc2 means are 10, 20 and 30;
/// every other panel stain is zero.
void write_muc2_fixture(const std::filesystem::path& dir, const std::string& slide_id = "fx") {
  const int w = 40, h = 20;
  LabelGrid labels(w, h, 0);
  IntensityGrid muc2(w, h, 0);
  for (int id = 1; id <= 3; ++id) {
    for (int y = 0; y < 10; ++y) {
      for (int x = (id - 1) * 10; x < id * 10; ++x) {
        labels(x, y) = static_cast<std::uint32_t>(id);
        muc2(x, y) = static_cast<std::uint16_t>(10 * id);
      }
    }
  }
  SlideManifest m;
  m.slide_id = slide_id;
  m.patient_id = "p";
  m.width_px = w;
  m.height_px = h;
  m.microns_per_pixel = 0.5;
  std::vector<ChannelRaster> channels;
  for (const auto& s : cascade::table1_program().stains()) {
    m.channels.push_back(s);
    channels.push_back({s, s == "Muc2" ? muc2 : IntensityGrid(w, h, 0)});
  }
  std::filesystem::create_directories(dir);
  write_bundle(dir, m, channels, labels);
}

ThresholdService make_service(const std::filesystem::path& root) {
  return ThresholdService({root, {}}, cascade::table1_program());
}

std::vector<std::uint8_t> pixel(const std::vector<std::uint8_t>& rgba, int x, int y) {
  const auto* p = rgba.data() + (static_cast<std::size_t>(y) * kTileSize + x) * 4;
  return {p[0], p[1], p[2], p[3]};
}

}  // namespace

TEST(ThresholdService, HistogramBinsAreEqualWidth) {
  TempDir root;
  write_muc2_fixture(root / "fx");
  const auto svc = make_service(root.path());
  const auto h2 = svc.histogram("fx", "Muc2", 2);
  EXPECT_EQ(h2["counts"], (std::vector<int>{1, 2}));
  EXPECT_EQ(h2["edges"], (std::vector<double>{10, 20, 30}));
  const auto h1 = svc.histogram("fx", "Muc2", 1);
  EXPECT_EQ(h1["counts"], (std::vector<int>{3}));
  EXPECT_EQ(h1["instance_count"], 3);
}

TEST(ThresholdService, HistogramRejectsBadRequests) {
  TempDir root;
  write_muc2_fixture(root / "fx");
  const auto svc = make_service(root.path());
  auto status = [&](auto f) {
    try {
      f();
    } catch (const RequestError& e) {
      return e.status();
    }
    return 200;
  };
  EXPECT_EQ(status([&] { svc.histogram("fx", "Nope", 4); }), 400);
  EXPECT_EQ(status([&] { svc.histogram("fx", "Muc2", 0); }), 400);
  EXPECT_EQ(status([&] { svc.histogram("ghost", "Muc2", 4); }), 404);
}

TEST(ThresholdService, PutRecomputesPositivityAndClasses) {
  TempDir root;
  write_muc2_fixture(root / "fx");
  auto svc = make_service(root.path());
  // Unset thresholds sit above the bit-depth maximum, so nothing is positive yet.
  EXPECT_EQ(svc.state("fx")["excluded"], 3);

  auto r = svc.put_thresholds("fx", {{"Muc2", 15}});
  EXPECT_EQ(r["positive_counts"]["Muc2"], 2);
  EXPECT_EQ(r["class_counts"]["goblet"], 2);
  EXPECT_EQ(r["excluded"], 1);
  EXPECT_EQ(r["thresholds"]["Muc2"], 15.0);
  EXPECT_EQ(r["version"], 1);

  r = svc.put_thresholds("fx", {{"Muc2", 5}});
  EXPECT_EQ(r["positive_counts"]["Muc2"], 3);
  EXPECT_EQ(r["class_counts"]["goblet"], 3);
  EXPECT_EQ(svc.state("fx"), r);

  const auto hist = svc.histogram("fx", "Muc2", 2);
  EXPECT_EQ(hist["threshold"], 5.0);
  EXPECT_EQ(hist["positive_count"], 3);
}

TEST(ThresholdService, PersistedThresholdsSurviveRestart) {
  TempDir root;
  write_muc2_fixture(root / "fx");
  {
    auto svc = make_service(root.path());
    svc.put_thresholds("fx", {{"Muc2", 15}});
  }
  const auto svc = make_service(root.path());
  EXPECT_EQ(svc.state("fx")["class_counts"]["goblet"], 2);
  const auto saved = ThresholdSet::load(root / "fx" / kThresholdFile);
  EXPECT_EQ(saved.values.at("Muc2"), 15.0);
  EXPECT_EQ(saved.values.size(), cascade::table1_program().stains().size());
}

TEST(ThresholdService, PutRejectsBadInput) {
  TempDir root;
  write_muc2_fixture(root / "fx");
  auto svc = make_service(root.path());
  auto status = [&](const nlohmann::json& body) {
    try {
      svc.put_thresholds("fx", body);
    } catch (const RequestError& e) {
      return e.status();
    }
    return 200;
  };
  EXPECT_EQ(status({{"Nope", 3}}), 400);
  EXPECT_EQ(status({{"Muc2", -1}}), 400);
  EXPECT_EQ(status({{"Muc2", "high"}}), 400);
  EXPECT_EQ(status(nlohmann::json::array({1})), 400);
  // A rejected PUT leaves the state untouched.
  EXPECT_EQ(svc.state("fx")["version"], 0);
}

TEST(ThresholdService, ConcurrentPutsAreSerialized) {
  TempDir root;
  write_muc2_fixture(root / "fx");
  auto svc = make_service(root.path());
  std::vector<std::thread> writers;
  for (int t = 0; t < 8; ++t) {
    writers.emplace_back([&, t] {
      for (int i = 0; i < 10; ++i) svc.put_thresholds("fx", {{"Muc2", 5 + ((t + i) % 3) * 10}});
    });
  }
  for (auto& w : writers) w.join();
  const auto s = svc.state("fx");
  EXPECT_EQ(s["version"], 80);
  // Whatever write landed last, the published state is self-consistent.
  const double th = s["thresholds"]["Muc2"];
  const int expected = th <= 10 ? 3 : th <= 20 ? 2 : th <= 30 ? 1 : 0;
  EXPECT_EQ(s["positive_counts"]["Muc2"], expected);
  EXPECT_EQ(s["class_counts"]["goblet"], expected);
  EXPECT_EQ(ThresholdSet::load(root / "fx" / kThresholdFile).values.at("Muc2"), th);
}

TEST(ThresholdService, CorruptBundleBecomesWarning) {
  TempDir root;
  write_muc2_fixture(root / "good");
  std::filesystem::create_directories(root / "bad");
  std::ofstream(root / "bad" / "manifest.json") << "{ not json";
  const auto svc = make_service(root.path());
  ASSERT_EQ(svc.warnings().size(), 1u);
  EXPECT_NE(svc.warnings()[0].find("bad"), std::string::npos);
  const auto slides = svc.list_slides();
  ASSERT_EQ(slides.size(), 1u);
  EXPECT_EQ(slides[0]["slide_id"], "fx");
}

TEST(ThresholdService, EmptyRootListsNothing) {
  TempDir root;
  const auto svc = make_service(root.path());
  EXPECT_EQ(svc.list_slides(), nlohmann::json::array());
  EXPECT_TRUE(svc.warnings().empty());
}

TEST(ThresholdService, ClassTileColorsAndTransparency) {
  TempDir root;
  write_muc2_fixture(root / "fx");
  auto svc = make_service(root.path());
  svc.put_thresholds("fx", {{"Muc2", 25}});  // only instance 3 becomes goblet
  TileQuery q;
  const auto rgba = svc.tile_rgba("fx", q);
  const auto goblet = palette_color(CellClass::goblet);
  const auto excluded = palette_color(CellClass::excluded);
  EXPECT_EQ(pixel(rgba, 25, 5), (std::vector<std::uint8_t>{goblet.r, goblet.g, goblet.b, 255}));
  EXPECT_EQ(pixel(rgba, 5, 5), (std::vector<std::uint8_t>{excluded.r, excluded.g, excluded.b, 255}));
  EXPECT_EQ(pixel(rgba, 5, 15)[3], 0);   // background inside the image
  EXPECT_EQ(pixel(rgba, 100, 5)[3], 0);  // beyond the image

  q.layer = Layer::parse("positivity:Muc2");
  const auto pos = svc.tile_rgba("fx", q);
  EXPECT_EQ(pixel(pos, 25, 5), (std::vector<std::uint8_t>{kPositiveColor.r, kPositiveColor.g, kPositiveColor.b, 255}));
  EXPECT_EQ(pixel(pos, 15, 5), (std::vector<std::uint8_t>{kNegativeColor.r, kNegativeColor.g, kNegativeColor.b, 255}));

  q.layer = Layer::parse("channel:Muc2");
  q.window_lo = 0;
  q.window_hi = 30;
  const auto ch = svc.tile_rgba("fx", q);
  EXPECT_EQ(pixel(ch, 25, 5), (std::vector<std::uint8_t>{255, 255, 255, 255}));
  EXPECT_EQ(pixel(ch, 5, 5)[0], 85);
  EXPECT_EQ(pixel(ch, 5, 15)[0], 0);
}

TEST(ThresholdService, TileCoordinatesAreValidated) {
  TempDir root;
  write_muc2_fixture(root / "fx");
  const auto svc = make_service(root.path());
  auto status = [&](TileQuery q) {
    try {
      svc.tile_rgba("fx", q);
    } catch (const RequestError& e) {
      return e.status();
    }
    return 200;
  };
  auto query = [](int z, int x, const std::string& layer) {
    TileQuery q;
    q.z = z;
    q.x = x;
    q.layer = Layer::parse(layer);
    return q;
  };
  EXPECT_EQ(status(query(1, 0, "class")), 404);
  EXPECT_EQ(status(query(0, 1, "class")), 404);
  EXPECT_EQ(status(query(0, 0, "channel:Nope")), 400);
  EXPECT_THROW(Layer::parse("sparkles"), RequestError);
}

TEST(ThresholdService, CoarserLevelIsNearestDownsampleOfFinerTiles) {
  TempDir root;
  synthetic::SlideSpec spec;
  spec.slide_id = "big";
  spec.width = 600;
  spec.height = 540;
  const auto slide = synthetic::make_slide(spec);
  write_bundle(root / "big", slide.manifest, slide.channels, slide.instances);
  auto svc = make_service(root.path());
  svc.put_thresholds("big", {{"Muc2", synthetic::separating_threshold(spec)},
                             {"NaKATPase", synthetic::separating_threshold(spec)}});
  ASSERT_EQ(svc.session("big").levels(), 3);

  for (const auto* layer : {"class", "channel:HE_R"}) {
    auto query = [&](int z, int x, int y) {
      TileQuery q;
      q.z = z;
      q.x = x;
      q.y = y;
      q.layer = Layer::parse(layer);
      return q;
    };
    const auto top = svc.tile_rgba("big", query(1, 0, 0));
    std::map<std::pair<int, int>, std::vector<std::uint8_t>> fine;
    for (int ty = 0; ty < 3; ++ty) {
      for (int tx = 0; tx < 3; ++tx) {
        fine[{tx, ty}] = svc.tile_rgba("big", query(0, tx, ty));
      }
    }
    for (int y = 0; y < kTileSize; ++y) {
      for (int x = 0; x < kTileSize; ++x) {
        const int sx = 2 * x, sy = 2 * y;
        const auto expected = sx < spec.width && sy < spec.height
                                  ? pixel(fine[{sx / kTileSize, sy / kTileSize}], sx % kTileSize, sy % kTileSize)
                                  : std::vector<std::uint8_t>{0, 0, 0, 0};
        ASSERT_EQ(pixel(top, x, y), expected) << layer << " at " << x << "," << y;
      }
    }
  }
}

TEST(Palette, MatchesDocumentation) {
  std::ifstream in(testing_support::source_dir() / "docs/palette.md");
  ASSERT_TRUE(in);
  const std::regex row(R"(^\| (\w+) \| #([0-9a-f]{6}) \| (\d+) \| (\d+) \| (\d+) \|$)");
  std::map<std::string, Rgb> documented;
  std::string line;
  while (std::getline(in, line)) {
    std::smatch m;
    if (!std::regex_match(line, m, row)) continue;
    const Rgb c{static_cast<std::uint8_t>(std::stoi(m[3])), static_cast<std::uint8_t>(std::stoi(m[4])),
                static_cast<std::uint8_t>(std::stoi(m[5]))};
    const auto hex = std::stoul(m[2].str(), nullptr, 16);
    EXPECT_EQ(hex, (static_cast<unsigned long>(c.r) << 16) | (c.g << 8) | c.b) << m[1];
    documented[m[1]] = c;
  }
  ASSERT_EQ(documented.size(), kOutcomeCount + 2);
  auto same = [](Rgb a, Rgb b) { return a.r == b.r && a.g == b.g && a.b == b.b; };
  for (std::size_t i = 0; i < kOutcomeCount; ++i) {
    const auto name = std::string(kOutcomeNames[i]);
    ASSERT_TRUE(documented.contains(name)) << name;
    EXPECT_TRUE(same(documented[name], kClassPalette[i])) << name;
  }
  EXPECT_TRUE(same(documented["positive"], kPositiveColor));
  EXPECT_TRUE(same(documented["negative"], kNegativeColor));
}

TEST(ThresholdServiceHttp, RoutesOverLoopback) {
  TempDir root;
  write_muc2_fixture(root / "fx");
  std::filesystem::create_directories(root / "bad");
  std::ofstream(root / "bad" / "manifest.json") << "[]";
  auto svc = make_service(root.path());
  httplib::Server server;
  svc.mount(server);
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread loop([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  httplib::Client client("127.0.0.1", port);
  auto slides = client.Get("/api/slides");
  ASSERT_TRUE(slides);
  EXPECT_EQ(slides->status, 200);
  EXPECT_TRUE(nlohmann::json::parse(slides->body).is_array());
  EXPECT_TRUE(slides->has_header(kWarningsHeader));

  auto put = client.Put("/api/slides/fx/thresholds", R"({"Muc2": 15})", "application/json");
  ASSERT_TRUE(put);
  EXPECT_EQ(put->status, 200);
  EXPECT_EQ(nlohmann::json::parse(put->body)["class_counts"]["goblet"], 2);

  auto bad = client.Put("/api/slides/fx/thresholds", R"({"Muc2": -4})", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  auto garbage = client.Put("/api/slides/fx/thresholds", "nope", "application/json");
  ASSERT_TRUE(garbage);
  EXPECT_EQ(garbage->status, 400);

  auto hist = client.Get("/api/slides/fx/histogram?stain=Muc2&bins=2");
  ASSERT_TRUE(hist);
  EXPECT_EQ(nlohmann::json::parse(hist->body)["counts"], (std::vector<int>{1, 2}));

  auto tile = client.Get("/api/slides/fx/tiles/0/0/0.png?layer=class");
  ASSERT_TRUE(tile);
  EXPECT_EQ(tile->status, 200);
  EXPECT_EQ(tile->get_header_value("Content-Type"), "image/png");
  EXPECT_EQ(tile->body.substr(1, 3), "PNG");
  EXPECT_EQ(client.Get("/api/slides/fx/tiles/9/0/0")->status, 404);
  EXPECT_EQ(client.Get("/api/slides/ghost/state")->status, 404);
  EXPECT_EQ(client.Get("/")->status, 200);

  server.stop();
  loop.join();
}
