#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "cytogate/grid.hpp"
#include "cytogate/slide_io.hpp"

namespace cytogate {

struct InstanceStats {
  std::uint32_t id = 0;
  std::int64_t area_px = 0;
  double centroid_x = 0.0;
  double centroid_y = 0.0;
  std::vector<double> mean_intensity;  // one per table channel
  // Bounding box, inclusive. Not serialized.
  int min_x = 0, min_y = 0, max_x = 0, max_y = 0;
};

struct InstanceStatsTable {
  std::vector<std::string> channels;
  std::vector<InstanceStats> rows;  // ascending id

  std::size_t channel_index(std::string_view name) const;  // throws unknown_channel
  bool has_channel(std::string_view name) const;
  const InstanceStats* find(std::uint32_t id) const;

  void write_csv(const std::filesystem::path& path) const;
  static InstanceStatsTable read_csv(const std::filesystem::path& path);
};

/// Exact integer partial sums for a set of instances. Accumulators built from
/// disjoint regions merge to the same totals regardless of order or tiling.
class StatsAccumulator {
 public:
  explicit StatsAccumulator(std::size_t channel_count) : channel_count_(channel_count) {}

  /// Adds the rectangle [x0,x1) x [y0,y1) of `labels`/`channels`, whose
  /// pixel (0,0) sits at image coordinate (origin_x, origin_y).
  void add_region(const LabelGrid& labels, std::span<const IntensityGrid* const> channels, int x0,
                  int y0, int x1, int y1, int origin_x, int origin_y);
  void merge(const StatsAccumulator& other);

  InstanceStatsTable finish(std::vector<std::string> channel_names) const;
  std::size_t instance_count() const noexcept { return partials_.size(); }

 private:
  struct Partial {
    std::int64_t count = 0;
    std::int64_t sum_x = 0;
    std::int64_t sum_y = 0;
    int min_x = 0, min_y = 0, max_x = 0, max_y = 0;
    std::vector<std::uint64_t> sums;
  };
  std::size_t channel_count_;
  std::unordered_map<std::uint32_t, Partial> partials_;
};

struct StatsOptions {
  int tile_size = 512;
  unsigned threads = 1;
};

/// Streams the bundle in bands of `tile_size` rows; within a band each
/// tile is aggregated separately and merged.
InstanceStatsTable compute_stats(const SlideBundle& bundle, const std::vector<std::string>& channels,
                                 const StatsOptions& options = {});

/// In-memory variant over the same tiling scheme.
InstanceStatsTable compute_stats(const LabelGrid& instances, std::span<const ChannelRaster> channels,
                                 int tile_size);

struct ThresholdSet {
  std::map<std::string, double> values;
  nlohmann::json meta = nlohmann::json::object();

  /// Throws invalid_argument for non-finite or negative thresholds.
  void validate() const;

  nlohmann::json to_json() const;
  static ThresholdSet from_json(const nlohmann::json& j);
  static ThresholdSet load(const std::filesystem::path& path);
  /// Writes via a temporary file and rename so readers never see a partial file.
  void save(const std::filesystem::path& path) const;
};

class PositivityMatrix {
 public:
  PositivityMatrix() = default;
  PositivityMatrix(std::vector<std::uint32_t> ids, std::vector<std::string> stains);

  const std::vector<std::uint32_t>& ids() const noexcept { return ids_; }
  const std::vector<std::string>& stains() const noexcept { return stains_; }
  std::size_t rows() const noexcept { return ids_.size(); }
  std::size_t cols() const noexcept { return stains_.size(); }

  bool at(std::size_t row, std::size_t col) const noexcept { return bits_[row * cols() + col] != 0; }
  void set(std::size_t row, std::size_t col, bool positive) noexcept {
    bits_[row * cols() + col] = positive ? 1 : 0;
  }
  /// Column index or npos.
  std::size_t stain_index(std::string_view stain) const noexcept;
  std::size_t positive_count(std::size_t col) const noexcept;

  void write_csv(const std::filesystem::path& path) const;
  static PositivityMatrix read_csv(const std::filesystem::path& path);

  friend bool operator==(const PositivityMatrix&, const PositivityMatrix&) = default;

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

 private:
  std::vector<std::uint32_t> ids_;
  std::vector<std::string> stains_;
  std::vector<std::uint8_t> bits_;
};

/// positive <=> mean >= threshold. Columns follow the threshold set's order.
PositivityMatrix apply_thresholds(const InstanceStatsTable& stats, const ThresholdSet& thresholds);

}  // namespace cytogate
