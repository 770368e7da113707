#include "cytogate/instance_stats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <thread>

#include "cytogate/csv.hpp"
#include "cytogate/error.hpp"

namespace cytogate {

std::size_t InstanceStatsTable::channel_index(std::string_view name) const {
  for (std::size_t i = 0; i < channels.size(); ++i) {
    if (channels[i] == name) return i;
  }
  throw Error(ErrorKind::unknown_channel, "stats table has no column '" + std::string(name) + "'");
}

bool InstanceStatsTable::has_channel(std::string_view name) const {
  return std::find(channels.begin(), channels.end(), name) != channels.end();
}

const InstanceStats* InstanceStatsTable::find(std::uint32_t id) const {
  auto it = std::lower_bound(rows.begin(), rows.end(), id,
                             [](const InstanceStats& r, std::uint32_t v) { return r.id < v; });
  return (it != rows.end() && it->id == id) ? &*it : nullptr;
}

void InstanceStatsTable::write_csv(const std::filesystem::path& path) const {
  csv::Table t;
  t.header = {"instance_id", "area_px", "centroid_x", "centroid_y"};
  t.header.insert(t.header.end(), channels.begin(), channels.end());
  t.rows.reserve(rows.size());
  for (const auto& r : rows) {
    std::vector<std::string> f{std::to_string(r.id), std::to_string(r.area_px),
                               csv::format_double(r.centroid_x), csv::format_double(r.centroid_y)};
    for (double m : r.mean_intensity) f.push_back(csv::format_double(m));
    t.rows.push_back(std::move(f));
  }
  csv::write(path, t);
}

InstanceStatsTable InstanceStatsTable::read_csv(const std::filesystem::path& path) {
  const auto t = csv::read(path);
  if (t.header.size() < 4 || t.header[0] != "instance_id" || t.header[1] != "area_px" ||
      t.header[2] != "centroid_x" || t.header[3] != "centroid_y") {
    throw Error(ErrorKind::format, path.string() + ": not a stats table");
  }
  InstanceStatsTable table;
  table.channels.assign(t.header.begin() + 4, t.header.end());
  for (const auto& f : t.rows) {
    InstanceStats r;
    r.id = static_cast<std::uint32_t>(csv::parse_int(f[0]));
    r.area_px = csv::parse_int(f[1]);
    r.centroid_x = csv::parse_double(f[2]);
    r.centroid_y = csv::parse_double(f[3]);
    for (std::size_t c = 4; c < f.size(); ++c) r.mean_intensity.push_back(csv::parse_double(f[c]));
    r.min_x = r.max_x = static_cast<int>(std::floor(r.centroid_x));
    r.min_y = r.max_y = static_cast<int>(std::floor(r.centroid_y));
    table.rows.push_back(std::move(r));
  }
  std::sort(table.rows.begin(), table.rows.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });
  return table;
}

void StatsAccumulator::add_region(const LabelGrid& labels,
                                  std::span<const IntensityGrid* const> channels, int x0, int y0,
                                  int x1, int y1, int origin_x, int origin_y) {
  if (channels.size() != channel_count_) {
    throw Error(ErrorKind::invalid_argument, "channel count differs from accumulator");
  }
  // Cache the last-touched partial; instances are spatially coherent.
  std::uint32_t last_id = 0;
  Partial* last = nullptr;
  for (int y = y0; y < y1; ++y) {
    const auto label_row = labels.row(y);
    for (int x = x0; x < x1; ++x) {
      const std::uint32_t id = label_row[static_cast<std::size_t>(x)];
      if (id == 0) continue;
      const int gx = origin_x + x;
      const int gy = origin_y + y;
      if (id != last_id || last == nullptr) {
        auto [it, inserted] = partials_.try_emplace(id);
        last = &it->second;
        last_id = id;
        if (inserted) {
          last->sums.assign(channel_count_, 0);
          last->min_x = last->max_x = gx;
          last->min_y = last->max_y = gy;
        }
      }
      Partial& p = *last;
      ++p.count;
      p.sum_x += gx;
      p.sum_y += gy;
      p.min_x = std::min(p.min_x, gx);
      p.max_x = std::max(p.max_x, gx);
      p.min_y = std::min(p.min_y, gy);
      p.max_y = std::max(p.max_y, gy);
      for (std::size_t c = 0; c < channel_count_; ++c) p.sums[c] += (*channels[c])(x, y);
    }
  }
}

void StatsAccumulator::merge(const StatsAccumulator& other) {
  if (other.channel_count_ != channel_count_) {
    throw Error(ErrorKind::invalid_argument, "cannot merge accumulators with different channels");
  }
  for (const auto& [id, src] : other.partials_) {
    auto [it, inserted] = partials_.try_emplace(id, src);
    if (inserted) continue;
    Partial& dst = it->second;
    dst.count += src.count;
    dst.sum_x += src.sum_x;
    dst.sum_y += src.sum_y;
    dst.min_x = std::min(dst.min_x, src.min_x);
    dst.max_x = std::max(dst.max_x, src.max_x);
    dst.min_y = std::min(dst.min_y, src.min_y);
    dst.max_y = std::max(dst.max_y, src.max_y);
    for (std::size_t c = 0; c < channel_count_; ++c) dst.sums[c] += src.sums[c];
  }
}

InstanceStatsTable StatsAccumulator::finish(std::vector<std::string> channel_names) const {
  if (channel_names.size() != channel_count_) {
    throw Error(ErrorKind::invalid_argument, "channel name count differs from accumulator");
  }
  InstanceStatsTable table;
  table.channels = std::move(channel_names);
  table.rows.reserve(partials_.size());
  for (const auto& [id, p] : partials_) {
    InstanceStats r;
    r.id = id;
    r.area_px = p.count;
    const auto n = static_cast<double>(p.count);
    r.centroid_x = static_cast<double>(p.sum_x) / n;
    r.centroid_y = static_cast<double>(p.sum_y) / n;
    r.mean_intensity.reserve(channel_count_);
    for (auto s : p.sums) r.mean_intensity.push_back(static_cast<double>(s) / n);
    r.min_x = p.min_x;
    r.min_y = p.min_y;
    r.max_x = p.max_x;
    r.max_y = p.max_y;
    table.rows.push_back(std::move(r));
  }
  std::sort(table.rows.begin(), table.rows.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });
  return table;
}

namespace {

void check_tile_size(int tile_size) {
  if (tile_size <= 0) throw Error(ErrorKind::invalid_argument, "tile size must be positive");
}

/// Aggregates every tile of one band (rows [0, band_height) of the band grids).
void aggregate_band(StatsAccumulator& total, const LabelGrid& labels,
                    const std::vector<const IntensityGrid*>& channels, int band_height,
                    int band_origin_y, int tile_size, unsigned threads) {
  const int width = labels.width();
  const int tiles = (width + tile_size - 1) / tile_size;
  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(tiles)));
  if (workers == 1) {
    for (int t = 0; t < tiles; ++t) {
      const int x0 = t * tile_size;
      total.add_region(labels, channels, x0, 0, std::min(x0 + tile_size, width), band_height, 0,
                       band_origin_y);
    }
    return;
  }
  std::vector<StatsAccumulator> partial(workers, StatsAccumulator(channels.size()));
  {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (int t = static_cast<int>(w); t < tiles; t += static_cast<int>(workers)) {
          const int x0 = t * tile_size;
          partial[w].add_region(labels, channels, x0, 0, std::min(x0 + tile_size, width),
                                band_height, 0, band_origin_y);
        }
      });
    }
  }
  for (const auto& p : partial) total.merge(p);
}

}  // namespace

InstanceStatsTable compute_stats(const SlideBundle& bundle, const std::vector<std::string>& channels,
                                 const StatsOptions& options) {
  check_tile_size(options.tile_size);
  if (!bundle.has_instance_map()) throw Error(ErrorKind::io, "bundle has no instance map");
  const int width = bundle.width();
  const int height = bundle.height();
  const int band = std::min(options.tile_size, height);

  std::vector<png::RowReader> readers;
  readers.reserve(channels.size());
  for (const auto& c : channels) readers.push_back(bundle.channel_rows(c));
  auto label_reader = bundle.instance_rows();

  LabelGrid band_labels(width, band);
  std::vector<IntensityGrid> band_channels(channels.size(), IntensityGrid(width, band));
  std::vector<const IntensityGrid*> channel_ptrs;
  for (const auto& g : band_channels) channel_ptrs.push_back(&g);

  StatsAccumulator total(channels.size());
  for (int y0 = 0; y0 < height; y0 += band) {
    const int rows = std::min(band, height - y0);
    for (int r = 0; r < rows; ++r) {
      label_reader.read_row(band_labels.row(r));
      for (std::size_t c = 0; c < readers.size(); ++c) readers[c].read_row(band_channels[c].row(r));
    }
    aggregate_band(total, band_labels, channel_ptrs, rows, y0, options.tile_size, options.threads);
  }
  return total.finish(channels);
}

InstanceStatsTable compute_stats(const LabelGrid& instances, std::span<const ChannelRaster> channels,
                                 int tile_size) {
  check_tile_size(tile_size);
  std::vector<const IntensityGrid*> ptrs;
  std::vector<std::string> names;
  for (const auto& c : channels) {
    if (c.pixels.width() != instances.width() || c.pixels.height() != instances.height()) {
      throw Error(ErrorKind::dimension_mismatch, "channel '" + c.name + "' dimensions differ");
    }
    ptrs.push_back(&c.pixels);
    names.push_back(c.name);
  }
  StatsAccumulator total(ptrs.size());
  for (int y0 = 0; y0 < instances.height(); y0 += tile_size) {
    for (int x0 = 0; x0 < instances.width(); x0 += tile_size) {
      StatsAccumulator tile(ptrs.size());
      tile.add_region(instances, ptrs, x0, y0, std::min(x0 + tile_size, instances.width()),
                      std::min(y0 + tile_size, instances.height()), 0, 0);
      total.merge(tile);
    }
  }
  return total.finish(std::move(names));
}

void ThresholdSet::validate() const {
  for (const auto& [stain, value] : values) {
    if (!std::isfinite(value) || value < 0.0) {
      throw Error(ErrorKind::invalid_argument,
                  "threshold for '" + stain + "' must be finite and >= 0");
    }
  }
}

nlohmann::json ThresholdSet::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [stain, value] : values) j[stain] = value;
  j["_meta"] = meta;
  return j;
}

ThresholdSet ThresholdSet::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorKind::format, "threshold set must be a JSON object");
  ThresholdSet th;
  for (const auto& [key, value] : j.items()) {
    if (key == "_meta") {
      th.meta = value;
      continue;
    }
    if (!key.empty() && key.front() == '_') continue;
    if (!value.is_number()) {
      throw Error(ErrorKind::format, "threshold for '" + key + "' is not a number");
    }
    th.values[key] = value.get<double>();
  }
  th.validate();
  return th;
}

ThresholdSet ThresholdSet::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::format, path.string() + ": " + e.what());
  }
}

void ThresholdSet::save(const std::filesystem::path& path) const {
  validate();
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot write " + tmp.string());
    out << to_json().dump(2) << '\n';
    if (!out) throw Error(ErrorKind::io, "write failed " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorKind::io, "cannot replace " + path.string() + ": " + ec.message());
}

PositivityMatrix::PositivityMatrix(std::vector<std::uint32_t> ids, std::vector<std::string> stains)
    : ids_(std::move(ids)), stains_(std::move(stains)), bits_(ids_.size() * stains_.size(), 0) {}

std::size_t PositivityMatrix::stain_index(std::string_view stain) const noexcept {
  for (std::size_t i = 0; i < stains_.size(); ++i) {
    if (stains_[i] == stain) return i;
  }
  return npos;
}

std::size_t PositivityMatrix::positive_count(std::size_t col) const noexcept {
  std::size_t n = 0;
  for (std::size_t r = 0; r < rows(); ++r) n += at(r, col) ? 1 : 0;
  return n;
}

void PositivityMatrix::write_csv(const std::filesystem::path& path) const {
  csv::Table t;
  t.header = {"instance_id"};
  t.header.insert(t.header.end(), stains_.begin(), stains_.end());
  for (std::size_t r = 0; r < rows(); ++r) {
    std::vector<std::string> f{std::to_string(ids_[r])};
    for (std::size_t c = 0; c < cols(); ++c) f.emplace_back(at(r, c) ? "1" : "0");
    t.rows.push_back(std::move(f));
  }
  csv::write(path, t);
}

PositivityMatrix PositivityMatrix::read_csv(const std::filesystem::path& path) {
  const auto t = csv::read(path);
  if (t.header.empty() || t.header[0] != "instance_id") {
    throw Error(ErrorKind::format, path.string() + ": not a positivity matrix");
  }
  std::vector<std::uint32_t> ids;
  for (const auto& f : t.rows) ids.push_back(static_cast<std::uint32_t>(csv::parse_int(f[0])));
  PositivityMatrix pm(std::move(ids), {t.header.begin() + 1, t.header.end()});
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    for (std::size_t c = 0; c < pm.cols(); ++c) {
      const auto& v = t.rows[r][c + 1];
      if (v != "0" && v != "1") throw Error(ErrorKind::format, "positivity cell must be 0 or 1");
      pm.set(r, c, v == "1");
    }
  }
  return pm;
}

PositivityMatrix apply_thresholds(const InstanceStatsTable& stats, const ThresholdSet& thresholds) {
  thresholds.validate();
  std::vector<std::string> stains;
  std::vector<std::size_t> columns;
  std::vector<double> cut;
  for (const auto& [stain, value] : thresholds.values) {
    if (!stats.has_channel(stain)) {
      throw Error(ErrorKind::missing_stain, "no mean-intensity column for stain '" + stain + "'");
    }
    stains.push_back(stain);
    columns.push_back(stats.channel_index(stain));
    cut.push_back(value);
  }
  std::vector<std::uint32_t> ids;
  ids.reserve(stats.rows.size());
  for (const auto& r : stats.rows) ids.push_back(r.id);
  PositivityMatrix pm(std::move(ids), std::move(stains));
  for (std::size_t r = 0; r < stats.rows.size(); ++r) {
    for (std::size_t c = 0; c < columns.size(); ++c) {
      pm.set(r, c, stats.rows[r].mean_intensity[columns[c]] >= cut[c]);
    }
  }
  return pm;
}

}  // namespace cytogate
