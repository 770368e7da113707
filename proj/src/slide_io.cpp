#include "cytogate/slide_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <set>

#include "cytogate/error.hpp"

namespace cytogate {
namespace {

constexpr std::uint32_t byteswap32(std::uint32_t v) noexcept {
  return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
}

}  // namespace

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::io: return "io";
    case ErrorKind::format: return "format";
    case ErrorKind::dimension_mismatch: return "dimension_mismatch";
    case ErrorKind::unknown_channel: return "unknown_channel";
    case ErrorKind::out_of_bounds: return "out_of_bounds";
    case ErrorKind::invalid_argument: return "invalid_argument";
    case ErrorKind::syntax: return "syntax";
    case ErrorKind::undefined_group: return "undefined_group";
    case ErrorKind::unknown_class: return "unknown_class";
    case ErrorKind::missing_stain: return "missing_stain";
    case ErrorKind::exclusivity_violation: return "exclusivity_violation";
    case ErrorKind::too_many_stains: return "too_many_stains";
    case ErrorKind::infeasible: return "infeasible";
    case ErrorKind::divergence: return "divergence";
  }
  return "unknown";
}

std::string_view to_string(Site site) {
  switch (site) {
    case Site::ascending_colon: return "ascending_colon";
    case Site::terminal_ileum: return "terminal_ileum";
    case Site::other: return "other";
  }
  return "other";
}

std::string_view to_string(Disease disease) {
  return disease == Disease::normal ? "normal" : "diseased";
}

Site parse_site(std::string_view text) {
  if (text == "ascending_colon") return Site::ascending_colon;
  if (text == "terminal_ileum") return Site::terminal_ileum;
  if (text == "other") return Site::other;
  throw Error(ErrorKind::format, "unknown site '" + std::string(text) + "'");
}

Disease parse_disease(std::string_view text) {
  if (text == "normal") return Disease::normal;
  if (text == "diseased") return Disease::diseased;
  throw Error(ErrorKind::format, "unknown disease status '" + std::string(text) + "'");
}

bool SlideManifest::has_channel(std::string_view name) const {
  return std::find(channels.begin(), channels.end(), name) != channels.end();
}

void SlideManifest::validate() const {
  if (width_px <= 0 || height_px <= 0) {
    throw Error(ErrorKind::format, "manifest dimensions must be positive");
  }
  if (!(microns_per_pixel > 0.0) || !std::isfinite(microns_per_pixel)) {
    throw Error(ErrorKind::format, "microns_per_pixel must be positive");
  }
  if (bit_depth != 8 && bit_depth != 16) {
    throw Error(ErrorKind::format, "unknown bit depth " + std::to_string(bit_depth));
  }
  std::set<std::string> seen;
  for (const auto& c : channels) {
    if (!seen.insert(c).second) throw Error(ErrorKind::format, "duplicate channel '" + c + "'");
    if (!channel_files.contains(c)) {
      throw Error(ErrorKind::format, "channel '" + c + "' has no file entry");
    }
  }
  if (instance_map.empty()) throw Error(ErrorKind::format, "manifest lacks instance_map");
}

nlohmann::json SlideManifest::to_json() const {
  nlohmann::json j;
  j["slide_id"] = slide_id;
  j["patient_id"] = patient_id;
  j["site"] = std::string(to_string(site));
  j["disease"] = std::string(to_string(disease));
  j["width_px"] = width_px;
  j["height_px"] = height_px;
  j["microns_per_pixel"] = microns_per_pixel;
  j["bit_depth"] = bit_depth;
  j["channels"] = channels;
  j["instance_map"] = instance_map;
  j["channel_files"] = channel_files;
  return j;
}

SlideManifest SlideManifest::from_json(const nlohmann::json& j) {
  SlideManifest m;
  try {
    m.slide_id = j.at("slide_id").get<std::string>();
    m.patient_id = j.at("patient_id").get<std::string>();
    m.site = parse_site(j.at("site").get<std::string>());
    m.disease = parse_disease(j.at("disease").get<std::string>());
    m.width_px = j.at("width_px").get<int>();
    m.height_px = j.at("height_px").get<int>();
    m.microns_per_pixel = j.at("microns_per_pixel").get<double>();
    m.bit_depth = j.at("bit_depth").get<int>();
    m.channels = j.at("channels").get<std::vector<std::string>>();
    m.instance_map = j.at("instance_map").get<std::string>();
    m.channel_files = j.at("channel_files").get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::format, std::string("manifest: ") + e.what());
  }
  m.validate();
  return m;
}

InstanceRowReader::InstanceRowReader(const std::filesystem::path& path, int width, int height)
    : path_(path), stream_(path, std::ios::binary), width_(width), height_(height) {
  if (!stream_) throw Error(ErrorKind::io, "cannot open " + path.string());
}

void InstanceRowReader::read_row(std::span<std::uint32_t> out) {
  if (next_ >= height_) throw Error(ErrorKind::io, "read past last instance row");
  if (out.size() != static_cast<std::size_t>(width_)) {
    throw Error(ErrorKind::invalid_argument, "row buffer width mismatch");
  }
  stream_.read(reinterpret_cast<char*>(out.data()),
               static_cast<std::streamsize>(out.size() * sizeof(std::uint32_t)));
  if (!stream_) throw Error(ErrorKind::io, "truncated instance map " + path_.string());
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& v : out) v = byteswap32(v);
  }
  ++next_;
}

void InstanceRowReader::seek_row(int row) {
  if (row < 0 || row > height_) throw Error(ErrorKind::out_of_bounds, "instance row out of range");
  stream_.clear();
  stream_.seekg(static_cast<std::streamoff>(row) * width_ * 4);
  next_ = row;
}

namespace {

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::format, path.string() + ": " + e.what());
  }
}

struct Clip {
  int x0, y0, x1, y1;  // in-image rectangle, half-open
};

Clip clip_request(const TileRequest& req, int width, int height) {
  if (req.width <= 0 || req.height <= 0) {
    throw Error(ErrorKind::invalid_argument, "tile size must be positive");
  }
  Clip c{std::max(req.x, 0), std::max(req.y, 0), std::min(req.x + req.width, width),
         std::min(req.y + req.height, height)};
  if (c.x0 >= c.x1 || c.y0 >= c.y1) {
    throw Error(ErrorKind::out_of_bounds, "tile lies entirely outside the image");
  }
  return c;
}

}  // namespace

SlideBundle SlideBundle::open(const std::filesystem::path& dir) {
  SlideBundle b;
  b.dir_ = dir;
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) {
    throw Error(ErrorKind::io, "missing manifest " + manifest_path.string());
  }
  b.manifest_ = SlideManifest::from_json(read_json_file(manifest_path));
  for (const auto& name : b.manifest_.channels) {
    const auto header = png::read_header(b.channel_path(name));
    if (header.width != b.manifest_.width_px || header.height != b.manifest_.height_px) {
      throw Error(ErrorKind::dimension_mismatch,
                  "channel '" + name + "' is " + std::to_string(header.width) + "x" +
                      std::to_string(header.height) + ", manifest says " +
                      std::to_string(b.manifest_.width_px) + "x" +
                      std::to_string(b.manifest_.height_px));
    }
    if (header.bit_depth != b.manifest_.bit_depth) {
      throw Error(ErrorKind::format, "channel '" + name + "' bit depth differs from manifest");
    }
  }
  if (b.has_instance_map()) {
    const auto expected = static_cast<std::uintmax_t>(b.manifest_.width_px) *
                          static_cast<std::uintmax_t>(b.manifest_.height_px) * 4u;
    if (std::filesystem::file_size(b.instance_map_path()) != expected) {
      throw Error(ErrorKind::dimension_mismatch, "instance map size does not match manifest");
    }
  }
  return b;
}

bool SlideBundle::has_instance_map() const {
  return std::filesystem::exists(instance_map_path());
}

std::filesystem::path SlideBundle::channel_path(std::string_view channel) const {
  const auto it = manifest_.channel_files.find(std::string(channel));
  if (it == manifest_.channel_files.end() || !manifest_.has_channel(channel)) {
    throw Error(ErrorKind::unknown_channel, "unknown channel '" + std::string(channel) + "'");
  }
  return dir_ / it->second;
}

std::filesystem::path SlideBundle::instance_map_path() const { return dir_ / manifest_.instance_map; }

png::RowReader SlideBundle::channel_rows(std::string_view channel) const {
  return png::RowReader(channel_path(channel));
}

InstanceRowReader SlideBundle::instance_rows() const {
  if (!has_instance_map()) throw Error(ErrorKind::io, "bundle has no instance map");
  return InstanceRowReader(instance_map_path(), width(), height());
}

IntensityGrid SlideBundle::read_tile(std::string_view channel, const TileRequest& req) const {
  auto reader = channel_rows(channel);
  const Clip c = clip_request(req, width(), height());
  IntensityGrid tile(req.width, req.height, 0);
  std::vector<std::uint16_t> row(static_cast<std::size_t>(width()));
  reader.skip_rows(c.y0);
  for (int y = c.y0; y < c.y1; ++y) {
    reader.read_row(row);
    std::copy(row.begin() + c.x0, row.begin() + c.x1, tile.row(y - req.y).begin() + (c.x0 - req.x));
  }
  return tile;
}

LabelGrid SlideBundle::read_instance_tile(const TileRequest& req) const {
  auto reader = instance_rows();
  const Clip c = clip_request(req, width(), height());
  LabelGrid tile(req.width, req.height, 0);
  std::vector<std::uint32_t> row(static_cast<std::size_t>(width()));
  reader.seek_row(c.y0);
  for (int y = c.y0; y < c.y1; ++y) {
    reader.read_row(row);
    std::copy(row.begin() + c.x0, row.begin() + c.x1, tile.row(y - req.y).begin() + (c.x0 - req.x));
  }
  return tile;
}

IntensityGrid SlideBundle::read_channel(std::string_view channel) const {
  return png::read_gray(channel_path(channel));
}

LabelGrid SlideBundle::read_instance_map() const {
  if (!has_instance_map()) throw Error(ErrorKind::io, "bundle has no instance map");
  return read_instance_raw(instance_map_path(), width(), height());
}

LabelGrid read_instance_raw(const std::filesystem::path& path, int width, int height) {
  std::error_code ec;
  const auto bytes = std::filesystem::file_size(path, ec);
  if (ec) throw Error(ErrorKind::io, "cannot open " + path.string());
  if (bytes != static_cast<std::uintmax_t>(width) * static_cast<std::uintmax_t>(height) * 4u) {
    throw Error(ErrorKind::dimension_mismatch,
                path.string() + " holds " + std::to_string(bytes) + " bytes, expected " +
                    std::to_string(width) + "x" + std::to_string(height) + " uint32 values");
  }
  InstanceRowReader reader(path, width, height);
  LabelGrid grid(width, height);
  for (int y = 0; y < height; ++y) reader.read_row(grid.row(y));
  return grid;
}

void write_instance_raw(const std::filesystem::path& path, const LabelGrid& instances) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(instances.data().data()),
              static_cast<std::streamsize>(instances.size() * sizeof(std::uint32_t)));
  } else {
    for (auto v : instances.data()) {
      v = byteswap32(v);
      out.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
  }
  if (!out) throw Error(ErrorKind::io, "write failed " + path.string());
}

void write_bundle(const std::filesystem::path& dir, SlideManifest manifest,
                  const std::vector<ChannelRaster>& channels, const LabelGrid& instances) {
  std::filesystem::create_directories(dir);
  manifest.channels.clear();
  for (const auto& ch : channels) {
    manifest.channels.push_back(ch.name);
    if (!manifest.channel_files.contains(ch.name)) manifest.channel_files[ch.name] = ch.name + ".png";
  }
  std::erase_if(manifest.channel_files,
                [&](const auto& kv) { return !manifest.has_channel(kv.first); });
  manifest.validate();
  for (const auto& ch : channels) {
    if (ch.pixels.width() != manifest.width_px || ch.pixels.height() != manifest.height_px) {
      throw Error(ErrorKind::dimension_mismatch, "channel '" + ch.name + "' dimensions differ");
    }
    png::write_gray(dir / manifest.channel_files.at(ch.name), ch.pixels, manifest.bit_depth);
  }
  if (!instances.empty()) {
    if (instances.width() != manifest.width_px || instances.height() != manifest.height_px) {
      throw Error(ErrorKind::dimension_mismatch, "instance map dimensions differ");
    }
    write_instance_raw(dir / manifest.instance_map, instances);
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write manifest in " + dir.string());
  out << manifest.to_json().dump(2) << '\n';
}

ChannelRaster merge_channels_sum(const SlideBundle& bundle, const std::vector<std::string>& channels) {
  if (channels.empty()) throw Error(ErrorKind::invalid_argument, "merge needs at least one channel");
  std::vector<png::RowReader> readers;
  readers.reserve(channels.size());
  for (const auto& c : channels) readers.push_back(bundle.channel_rows(c));

  const std::uint32_t ceiling = bundle.manifest().max_value();
  ChannelRaster out;
  for (std::size_t i = 0; i < channels.size(); ++i) out.name += (i ? "+" : "") + channels[i];
  out.pixels = IntensityGrid(bundle.width(), bundle.height());
  std::vector<std::uint16_t> row(static_cast<std::size_t>(bundle.width()));
  std::vector<std::uint64_t> acc(row.size());
  for (int y = 0; y < bundle.height(); ++y) {
    std::fill(acc.begin(), acc.end(), std::uint64_t{0});
    for (auto& r : readers) {
      r.read_row(row);
      for (std::size_t x = 0; x < row.size(); ++x) acc[x] += row[x];
    }
    auto dst = out.pixels.row(y);
    for (std::size_t x = 0; x < acc.size(); ++x) {
      dst[x] = static_cast<std::uint16_t>(std::min<std::uint64_t>(acc[x], ceiling));
    }
  }
  return out;
}

}  // namespace cytogate
