#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cytogate/grid.hpp"
#include "cytogate/png_io.hpp"

namespace cytogate {

enum class Site { ascending_colon, terminal_ileum, other };
enum class Disease { normal, diseased };

std::string_view to_string(Site site);
std::string_view to_string(Disease disease);
Site parse_site(std::string_view text);
Disease parse_disease(std::string_view text);

struct SlideManifest {
  std::string slide_id;
  std::string patient_id;
  Site site = Site::other;
  Disease disease = Disease::normal;
  int width_px = 0;
  int height_px = 0;
  double microns_per_pixel = 0.0;
  int bit_depth = 16;
  std::vector<std::string> channels;
  std::string instance_map = "instances.raw";
  std::map<std::string, std::string> channel_files;

  std::uint32_t max_value() const noexcept { return (1u << bit_depth) - 1u; }
  bool has_channel(std::string_view name) const;

  /// Throws Error(format) when an invariant is violated.
  void validate() const;

  nlohmann::json to_json() const;
  static SlideManifest from_json(const nlohmann::json& j);
};

struct ChannelRaster {
  std::string name;
  IntensityGrid pixels;
};

struct TileRequest {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;
};

/// Sequential reader over the raw little-endian uint32 instance map.
class InstanceRowReader {
 public:
  InstanceRowReader(const std::filesystem::path& path, int width, int height);

  int next_row() const noexcept { return next_; }
  void read_row(std::span<std::uint32_t> out);
  void seek_row(int row);

 private:
  std::filesystem::path path_;
  std::ifstream stream_;
  int width_;
  int height_;
  int next_ = 0;
};

/// Read handle over an on-disk slide bundle. Opening validates the manifest
/// and raster headers only; pixel data is decoded on demand. Handles are
/// immutable and can be shared by concurrent readers.
class SlideBundle {
 public:
  static SlideBundle open(const std::filesystem::path& dir);

  const SlideManifest& manifest() const noexcept { return manifest_; }
  const std::filesystem::path& directory() const noexcept { return dir_; }
  int width() const noexcept { return manifest_.width_px; }
  int height() const noexcept { return manifest_.height_px; }
  bool has_instance_map() const;

  /// Out-of-image pixels are 0. Throws on unknown channel or a request that
  /// does not intersect the image.
  IntensityGrid read_tile(std::string_view channel, const TileRequest& req) const;
  LabelGrid read_instance_tile(const TileRequest& req) const;

  IntensityGrid read_channel(std::string_view channel) const;
  LabelGrid read_instance_map() const;

  png::RowReader channel_rows(std::string_view channel) const;
  InstanceRowReader instance_rows() const;

  std::filesystem::path channel_path(std::string_view channel) const;
  std::filesystem::path instance_map_path() const;

 private:
  std::filesystem::path dir_;
  SlideManifest manifest_;
};

/// Writes manifest, channel PNGs and the raw instance map. Channel file names
/// default to `<name>.png` when the manifest leaves them unset.
void write_bundle(const std::filesystem::path& dir, SlideManifest manifest,
                  const std::vector<ChannelRaster>& channels, const LabelGrid& instances);

LabelGrid read_instance_raw(const std::filesystem::path& path, int width, int height);
void write_instance_raw(const std::filesystem::path& path, const LabelGrid& instances);

/// Per-pixel sum of the named channels, accumulated in 64 bits and clamped
/// to the bundle's bit-depth maximum.
ChannelRaster merge_channels_sum(const SlideBundle& bundle, const std::vector<std::string>& channels);

}  // namespace cytogate
