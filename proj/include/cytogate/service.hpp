#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cytogate/cascade.hpp"
#include "cytogate/instance_stats.hpp"
#include "cytogate/slide_io.hpp"

namespace httplib {
class Server;
}

namespace cytogate::service {

inline constexpr int kTileSize = 256;
inline constexpr int kMaxHistogramBins = 1024;
inline constexpr const char* kThresholdFile = "thresholds.json";
inline constexpr const char* kWarningsHeader = "X-Cytogate-Warnings";

/// Request-level failure carrying the HTTP status to answer with.
class RequestError : public std::runtime_error {
 public:
  RequestError(int status, const std::string& message)
      : std::runtime_error(message), status_(status) {}
  int status() const noexcept { return status_; }

 private:
  int status_;
};

/// Immutable view of one slide's derived state. Replaced wholesale on every
/// threshold change, never edited in place.
struct Snapshot {
  ThresholdSet thresholds;  // complete: one value per panel stain present
  PositivityMatrix positivity;
  cascade::LabelAssignment labels;
  std::uint64_t version = 0;
};

class SlideSession {
 public:
  SlideSession(SlideBundle bundle, const cascade::RuleProgram& program);

  const SlideBundle& bundle() const noexcept { return bundle_; }
  const InstanceStatsTable& stats() const noexcept { return stats_; }
  std::shared_ptr<const Snapshot> snapshot() const;

  /// Validates and merges `updates`, persists the merged set, recomputes and
  /// publishes a new snapshot. Writers are serialized per slide.
  std::shared_ptr<const Snapshot> update(const std::map<std::string, double>& updates);

  /// Number of power-of-two pyramid levels; level 0 is full resolution.
  int levels() const noexcept;

 private:
  std::shared_ptr<const Snapshot> build(ThresholdSet thresholds, std::uint64_t version) const;

  SlideBundle bundle_;
  const cascade::RuleProgram* program_;
  InstanceStatsTable stats_;
  std::mutex write_mutex_;
  mutable std::mutex snapshot_mutex_;
  std::shared_ptr<const Snapshot> snapshot_;
};

enum class LayerKind { channel, positivity, cell_class };

struct Layer {
  LayerKind kind = LayerKind::cell_class;
  std::string name;  // channel or stain

  /// Parses `channel:<name>`, `positivity:<stain>` or `class`.
  static Layer parse(const std::string& text);
};

struct TileQuery {
  int z = 0;
  int x = 0;
  int y = 0;
  Layer layer;
  std::optional<std::uint32_t> window_lo;
  std::optional<std::uint32_t> window_hi;
};

struct ServiceConfig {
  std::filesystem::path root;
  std::filesystem::path static_dir;  // empty: no UI mount
};

/// Slide sessions over every bundle directly under the data root, plus the
/// request handlers. Handlers are callable without a socket, which is how
/// the tests drive them.
class ThresholdService {
 public:
  ThresholdService(ServiceConfig config, cascade::RuleProgram program);

  const std::vector<std::string>& warnings() const noexcept { return warnings_; }

  nlohmann::json list_slides() const;
  nlohmann::json histogram(const std::string& slide, const std::string& stain, int bins) const;
  nlohmann::json put_thresholds(const std::string& slide, const nlohmann::json& body);
  nlohmann::json state(const std::string& slide) const;
  /// RGBA pixels of a tile, kTileSize x kTileSize, row-major.
  std::vector<std::uint8_t> tile_rgba(const std::string& slide, const TileQuery& query) const;
  std::vector<std::uint8_t> tile_png(const std::string& slide, const TileQuery& query) const;

  SlideSession& session(const std::string& slide);
  const SlideSession& session(const std::string& slide) const;

  /// Registers all routes (and the static mount, if configured).
  void mount(httplib::Server& server);

 private:
  ServiceConfig config_;
  cascade::RuleProgram program_;
  std::map<std::string, std::unique_ptr<SlideSession>> sessions_;
  std::vector<std::string> warnings_;
};

/// JSON summary shared by PUT and GET state responses.
nlohmann::json describe(const SlideSession& session, const Snapshot& snapshot);

}  // namespace cytogate::service
