#include "cytogate/service.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include <httplib.h>

#include "cytogate/csv.hpp"
#include "cytogate/error.hpp"
#include "cytogate/palette.hpp"
#include "cytogate/png_io.hpp"

namespace cytogate::service {

namespace {

int status_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::io:
    case ErrorKind::format:
      return 500;
    case ErrorKind::exclusivity_violation:
      return 409;
    default:
      return 400;
  }
}

ThresholdSet complete_thresholds(const ThresholdSet& stored, const InstanceStatsTable& stats,
                                 const cascade::RuleProgram& program, std::uint32_t max_value) {
  ThresholdSet out;
  out.meta = stored.meta;
  // A stain nobody has gated yet sits above every possible mean, so it reads
  // as negative rather than missing.
  const double never = static_cast<double>(max_value) + 1.0;
  for (const auto& stain : program.stains()) {
    if (!stats.has_channel(stain)) continue;
    const auto it = stored.values.find(stain);
    out.values[stain] = it == stored.values.end() ? never : it->second;
  }
  for (const auto& [stain, value] : stored.values) {
    if (stats.has_channel(stain)) out.values.emplace(stain, value);
  }
  return out;
}

}  // namespace

SlideSession::SlideSession(SlideBundle bundle, const cascade::RuleProgram& program)
    : bundle_(std::move(bundle)), program_(&program) {
  stats_ = compute_stats(bundle_, bundle_.manifest().channels);
  ThresholdSet stored;
  const auto path = bundle_.directory() / kThresholdFile;
  if (std::filesystem::exists(path)) stored = ThresholdSet::load(path);
  snapshot_ = build(complete_thresholds(stored, stats_, *program_, bundle_.manifest().max_value()), 0);
}

std::shared_ptr<const Snapshot> SlideSession::snapshot() const {
  std::lock_guard lock(snapshot_mutex_);
  return snapshot_;
}

std::shared_ptr<const Snapshot> SlideSession::build(ThresholdSet thresholds,
                                                    std::uint64_t version) const {
  auto snap = std::make_shared<Snapshot>();
  snap->positivity = apply_thresholds(stats_, thresholds);
  snap->labels = cascade::run_cascade(*program_, snap->positivity);
  snap->thresholds = std::move(thresholds);
  snap->version = version;
  return snap;
}

std::shared_ptr<const Snapshot> SlideSession::update(const std::map<std::string, double>& updates) {
  std::lock_guard writer(write_mutex_);
  const auto current = snapshot();
  ThresholdSet merged = current->thresholds;
  for (const auto& [stain, value] : updates) {
    if (!stats_.has_channel(stain)) {
      throw RequestError(400, "unknown stain '" + stain + "' for slide " +
                                  bundle_.manifest().slide_id);
    }
    if (!std::isfinite(value) || value < 0.0) {
      throw RequestError(400, "threshold for '" + stain + "' must be finite and >= 0");
    }
    merged.values[stain] = value;
  }
  auto next = build(std::move(merged), current->version + 1);
  // Persist before publishing: a failed write leaves the old state visible.
  next->thresholds.save(bundle_.directory() / kThresholdFile);
  std::lock_guard lock(snapshot_mutex_);
  snapshot_ = next;
  return next;
}

int SlideSession::levels() const noexcept {
  int extent = std::max(bundle_.width(), bundle_.height());
  int levels = 1;
  while (extent > kTileSize) {
    extent = (extent + 1) / 2;
    ++levels;
  }
  return levels;
}

Layer Layer::parse(const std::string& text) {
  if (text == "class") return {LayerKind::cell_class, {}};
  const auto colon = text.find(':');
  if (colon != std::string::npos && colon + 1 < text.size()) {
    const auto kind = text.substr(0, colon);
    const auto name = text.substr(colon + 1);
    if (kind == "channel") return {LayerKind::channel, name};
    if (kind == "positivity") return {LayerKind::positivity, name};
  }
  throw RequestError(400, "bad layer '" + text + "' (channel:<name>, positivity:<stain> or class)");
}

ThresholdService::ThresholdService(ServiceConfig config, cascade::RuleProgram program)
    : config_(std::move(config)), program_(std::move(program)) {
  if (!std::filesystem::is_directory(config_.root)) {
    throw Error(ErrorKind::io, "data root " + config_.root.string() + " is not a directory");
  }
  std::vector<std::filesystem::path> dirs;
  for (const auto& entry : std::filesystem::directory_iterator(config_.root)) {
    if (entry.is_directory() && std::filesystem::exists(entry.path() / "manifest.json")) {
      dirs.push_back(entry.path());
    }
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& dir : dirs) {
    try {
      auto session = std::make_unique<SlideSession>(SlideBundle::open(dir), program_);
      const auto id = session->bundle().manifest().slide_id;
      if (sessions_.contains(id)) {
        warnings_.push_back(dir.filename().string() + ": duplicate slide id '" + id + "'");
        continue;
      }
      sessions_.emplace(id, std::move(session));
    } catch (const std::exception& e) {
      warnings_.push_back(dir.filename().string() + ": " + e.what());
    }
  }
}

SlideSession& ThresholdService::session(const std::string& slide) {
  const auto it = sessions_.find(slide);
  if (it == sessions_.end()) throw RequestError(404, "unknown slide '" + slide + "'");
  return *it->second;
}

const SlideSession& ThresholdService::session(const std::string& slide) const {
  return const_cast<ThresholdService*>(this)->session(slide);
}

nlohmann::json ThresholdService::list_slides() const {
  auto out = nlohmann::json::array();
  for (const auto& [id, s] : sessions_) {
    const auto& m = s->bundle().manifest();
    out.push_back({{"slide_id", id},
                   {"patient_id", m.patient_id},
                   {"site", std::string(to_string(m.site))},
                   {"disease", std::string(to_string(m.disease))},
                   {"instance_count", s->stats().rows.size()},
                   {"width_px", m.width_px},
                   {"height_px", m.height_px},
                   {"microns_per_pixel", m.microns_per_pixel},
                   {"channels", m.channels},
                   {"levels", s->levels()}});
  }
  return out;
}

nlohmann::json ThresholdService::histogram(const std::string& slide, const std::string& stain,
                                           int bins) const {
  const auto& s = session(slide);
  if (bins < 1 || bins > kMaxHistogramBins) {
    throw RequestError(400, "bins must be in [1, " + std::to_string(kMaxHistogramBins) + "]");
  }
  if (!s.stats().has_channel(stain)) {
    throw RequestError(400, "unknown stain '" + stain + "' for slide " + slide);
  }
  const auto col = s.stats().channel_index(stain);
  const auto snap = s.snapshot();

  std::vector<double> means;
  means.reserve(s.stats().rows.size());
  for (const auto& r : s.stats().rows) means.push_back(r.mean_intensity[col]);
  double lo = 0.0, hi = 0.0;
  if (!means.empty()) {
    const auto [mn, mx] = std::minmax_element(means.begin(), means.end());
    lo = *mn;
    hi = *mx;
  }
  std::vector<double> edges(static_cast<std::size_t>(bins) + 1);
  for (int i = 0; i <= bins; ++i) edges[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / bins;
  edges.back() = hi;
  std::vector<std::int64_t> counts(static_cast<std::size_t>(bins), 0);
  for (double v : means) {
    // Equal-width bins, half-open except the last, which includes the max.
    int b = hi > lo ? static_cast<int>(std::floor((v - lo) / (hi - lo) * bins)) : 0;
    b = std::clamp(b, 0, bins - 1);
    ++counts[static_cast<std::size_t>(b)];
  }

  nlohmann::json j{{"slide_id", slide}, {"stain", stain}, {"edges", edges}, {"counts", counts},
                   {"instance_count", means.size()}};
  const auto th = snap->thresholds.values.find(stain);
  if (th != snap->thresholds.values.end()) {
    j["threshold"] = th->second;
    j["positive_count"] = std::count_if(means.begin(), means.end(),
                                        [t = th->second](double v) { return v >= t; });
  } else {
    j["threshold"] = nullptr;
    j["positive_count"] = nullptr;
  }
  return j;
}

nlohmann::json describe(const SlideSession& session, const Snapshot& snapshot) {
  nlohmann::json positives = nlohmann::json::object();
  for (std::size_t c = 0; c < snapshot.positivity.cols(); ++c) {
    positives[snapshot.positivity.stains()[c]] = snapshot.positivity.positive_count(c);
  }
  nlohmann::json classes = nlohmann::json::object();
  const auto counts = snapshot.labels.counts();
  for (std::size_t i = 0; i < kOutcomeCount; ++i) classes[std::string(kOutcomeNames[i])] = counts[i];
  auto thresholds = snapshot.thresholds.to_json();
  thresholds.erase("_meta");
  return {{"slide_id", session.bundle().manifest().slide_id},
          {"version", snapshot.version},
          {"instance_count", snapshot.labels.size()},
          {"thresholds", thresholds},
          {"positive_counts", positives},
          {"class_counts", classes},
          {"excluded", counts[index_of(CellClass::excluded)]},
          {"unlabeled", counts[index_of(CellClass::unlabeled)]}};
}

nlohmann::json ThresholdService::put_thresholds(const std::string& slide, const nlohmann::json& body) {
  auto& s = session(slide);
  if (!body.is_object()) throw RequestError(400, "body must be a JSON object of stain -> threshold");
  std::map<std::string, double> updates;
  for (const auto& [key, value] : body.items()) {
    if (!value.is_number()) throw RequestError(400, "threshold for '" + key + "' is not a number");
    updates[key] = value.get<double>();
  }
  const auto snap = s.update(updates);
  return describe(s, *snap);
}

nlohmann::json ThresholdService::state(const std::string& slide) const {
  const auto& s = session(slide);
  return describe(s, *s.snapshot());
}

std::vector<std::uint8_t> ThresholdService::tile_rgba(const std::string& slide,
                                                      const TileQuery& q) const {
  const auto& s = session(slide);
  const auto& bundle = s.bundle();
  if (q.z < 0 || q.z >= s.levels()) throw RequestError(404, "no pyramid level " + std::to_string(q.z));
  const long long scale = 1LL << q.z;
  const long long span = kTileSize * scale;
  const long long cols = (bundle.width() + span - 1) / span;
  const long long rows = (bundle.height() + span - 1) / span;
  if (q.x < 0 || q.y < 0 || q.x >= cols || q.y >= rows) {
    throw RequestError(404, "tile " + std::to_string(q.x) + "," + std::to_string(q.y) +
                                " outside level " + std::to_string(q.z));
  }

  const auto snap = s.snapshot();
  std::size_t stain_col = PositivityMatrix::npos;
  std::uint32_t lo = 0, hi = bundle.manifest().max_value();
  switch (q.layer.kind) {
    case LayerKind::channel:
      if (!bundle.manifest().has_channel(q.layer.name)) {
        throw RequestError(400, "unknown channel '" + q.layer.name + "'");
      }
      lo = q.window_lo.value_or(lo);
      hi = q.window_hi.value_or(hi);
      if (hi <= lo) throw RequestError(400, "channel window needs lo < hi");
      break;
    case LayerKind::positivity:
      stain_col = snap->positivity.stain_index(q.layer.name);
      if (stain_col == PositivityMatrix::npos) {
        throw RequestError(400, "no positivity for stain '" + q.layer.name + "'");
      }
      break;
    case LayerKind::cell_class:
      break;
  }

  std::vector<std::uint8_t> rgba(static_cast<std::size_t>(kTileSize) * kTileSize * 4, 0);
  const auto& ids = snap->labels.ids;
  auto paint_label = [&](std::uint32_t id, std::uint8_t* px) {
    if (id == 0) return;
    const auto it = std::lower_bound(ids.begin(), ids.end(), id);
    if (it == ids.end() || *it != id) return;
    const auto row = static_cast<std::size_t>(it - ids.begin());
    Rgb c{};
    if (q.layer.kind == LayerKind::cell_class) {
      c = palette_color(snap->labels.outcomes[row]);
    } else {
      c = snap->positivity.at(row, stain_col) ? kPositiveColor : kNegativeColor;
    }
    px[0] = c.r;
    px[1] = c.g;
    px[2] = c.b;
    px[3] = 255;
  };

  // Nearest pick of the top-left source pixel of each 2^z block. Only the
  // sampled source rows are decoded.
  const long long x0 = q.x * span;
  const long long y0 = q.y * span;
  const int width = bundle.width();
  std::vector<std::uint16_t> pixel_row(static_cast<std::size_t>(width));
  std::vector<std::uint32_t> label_row(static_cast<std::size_t>(width));
  std::optional<png::RowReader> channel_reader;
  std::optional<InstanceRowReader> label_reader;
  if (q.layer.kind == LayerKind::channel) {
    channel_reader.emplace(bundle.channel_rows(q.layer.name));
  } else {
    label_reader.emplace(bundle.instance_rows());
  }
  for (int ty = 0; ty < kTileSize; ++ty) {
    const long long sy = y0 + ty * scale;
    if (sy >= bundle.height()) break;
    if (channel_reader) {
      channel_reader->skip_rows(static_cast<int>(sy) - channel_reader->next_row());
      channel_reader->read_row(pixel_row);
    } else {
      label_reader->seek_row(static_cast<int>(sy));
      label_reader->read_row(label_row);
    }
    for (int tx = 0; tx < kTileSize; ++tx) {
      const long long sx = x0 + tx * scale;
      if (sx >= width) break;
      auto* px = rgba.data() + (static_cast<std::size_t>(ty) * kTileSize + tx) * 4;
      if (channel_reader) {
        const std::uint32_t v = std::clamp<std::uint32_t>(pixel_row[static_cast<std::size_t>(sx)], lo, hi);
        const auto g = static_cast<std::uint8_t>(
            (static_cast<std::uint64_t>(v - lo) * 255 + (hi - lo) / 2) / (hi - lo));
        px[0] = px[1] = px[2] = g;
        px[3] = 255;
      } else {
        paint_label(label_row[static_cast<std::size_t>(sx)], px);
      }
    }
  }
  return rgba;
}

std::vector<std::uint8_t> ThresholdService::tile_png(const std::string& slide,
                                                     const TileQuery& query) const {
  return png::encode_rgba(kTileSize, kTileSize, tile_rgba(slide, query));
}

namespace {

int parse_int_param(const std::string& text, const char* what) {
  int v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw RequestError(400, std::string("bad ") + what + " '" + text + "'");
  }
  return v;
}

template <typename Fn>
void guarded(httplib::Response& res, Fn&& fn) {
  try {
    fn();
  } catch (const RequestError& e) {
    res.status = e.status();
    res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
  } catch (const Error& e) {
    res.status = status_for(e.kind());
    res.set_content(nlohmann::json{{"error", e.what()}, {"kind", to_string(e.kind())}}.dump(),
                    "application/json");
  } catch (const nlohmann::json::exception& e) {
    res.status = 400;
    res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
  } catch (const std::exception& e) {
    res.status = 500;
    res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
  }
}

void reply_json(httplib::Response& res, const nlohmann::json& j) {
  res.set_content(j.dump(), "application/json");
}

}  // namespace

void ThresholdService::mount(httplib::Server& server) {
  server.Get("/api/slides", [this](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] {
      if (!warnings_.empty()) {
        std::string joined;
        for (const auto& w : warnings_) joined += (joined.empty() ? "" : "; ") + w;
        std::replace(joined.begin(), joined.end(), '\n', ' ');
        res.set_header(kWarningsHeader, joined);
      }
      reply_json(res, list_slides());
    });
  });

  server.Get(R"(/api/slides/([^/]+)/histogram)",
             [this](const httplib::Request& req, httplib::Response& res) {
               guarded(res, [&] {
                 if (!req.has_param("stain")) throw RequestError(400, "missing stain parameter");
                 const int bins =
                     req.has_param("bins") ? parse_int_param(req.get_param_value("bins"), "bins") : 64;
                 reply_json(res, histogram(req.matches[1], req.get_param_value("stain"), bins));
               });
             });

  server.Put(R"(/api/slides/([^/]+)/thresholds)",
             [this](const httplib::Request& req, httplib::Response& res) {
               guarded(res, [&] {
                 nlohmann::json body;
                 try {
                   body = nlohmann::json::parse(req.body);
                 } catch (const nlohmann::json::parse_error& e) {
                   throw RequestError(400, std::string("body is not JSON: ") + e.what());
                 }
                 reply_json(res, put_thresholds(req.matches[1], body));
               });
             });

  server.Get(R"(/api/slides/([^/]+)/state)", [this](const httplib::Request& req,
                                                    httplib::Response& res) {
    guarded(res, [&] { reply_json(res, state(req.matches[1])); });
  });

  server.Get(R"(/api/slides/([^/]+)/tiles/(\d+)/(\d+)/(\d+)(?:\.png)?)",
             [this](const httplib::Request& req, httplib::Response& res) {
               guarded(res, [&] {
                 TileQuery q;
                 q.z = parse_int_param(req.matches[2], "z");
                 q.x = parse_int_param(req.matches[3], "x");
                 q.y = parse_int_param(req.matches[4], "y");
                 q.layer = Layer::parse(req.has_param("layer") ? req.get_param_value("layer") : "class");
                 if (req.has_param("lo")) {
                   q.window_lo = static_cast<std::uint32_t>(
                       std::max(0, parse_int_param(req.get_param_value("lo"), "lo")));
                 }
                 if (req.has_param("hi")) {
                   q.window_hi = static_cast<std::uint32_t>(
                       std::max(0, parse_int_param(req.get_param_value("hi"), "hi")));
                 }
                 const auto bytes = tile_png(req.matches[1], q);
                 res.set_content(reinterpret_cast<const char*>(bytes.data()), bytes.size(), "image/png");
               });
             });

  if (!config_.static_dir.empty()) {
    if (!server.set_mount_point("/", config_.static_dir.string())) {
      throw Error(ErrorKind::io, "cannot serve static files from " + config_.static_dir.string());
    }
  } else {
    server.Get("/", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(
          "cytogate threshold service\n"
          "GET /api/slides\n"
          "GET /api/slides/{id}/histogram?stain=S&bins=B\n"
          "PUT /api/slides/{id}/thresholds\n"
          "GET /api/slides/{id}/state\n"
          "GET /api/slides/{id}/tiles/{z}/{x}/{y}?layer=class|channel:C|positivity:S\n",
          "text/plain");
    });
  }
}

}  // namespace cytogate::service
