#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cytogate/cell_class.hpp"
#include "cytogate/grid.hpp"
#include "cytogate/slide_io.hpp"

namespace cytogate::patches {

inline constexpr int kPatchSize = 41;
inline constexpr double kTargetMicronsPerPixel = 0.5;

/// Output extent for resampling `extent` pixels from src to dst resolution.
int resampled_extent(int extent, double src_mpp, double dst_mpp);

struct ResampleOptions {
  double kernel_a = -0.5;
  bool clamp = true;  // clamp output to the input's [min, max]
};

/// Separable bicubic resampling with border replication. Output pixel o
/// samples the source at (o + 0.5) * dst_mpp / src_mpp - 0.5.
RealGrid resample_bicubic(const RealGrid& src, double src_mpp, double dst_mpp,
                          const ResampleOptions& options = {});

/// Cubic convolution kernel value at distance x.
double cubic_kernel(double x, double a) noexcept;

/// Maps a source-pixel coordinate to the resampled grid and rounds half up.
int resampled_center(double coord, double src_mpp, double dst_mpp) noexcept;

/// Min-max scales the values to [0,1]; a constant patch becomes all zeros.
void normalize(std::span<float> values) noexcept;

struct Patch {
  int channels = 0;
  std::vector<float> values;  // channel-major, kPatchSize x kPatchSize per channel
  std::uint32_t instance_id = 0;
  CellClass label = CellClass::unlabeled;
  std::string slide_id;
  double cx_um = 0.0;
  double cy_um = 0.0;

  float at(int channel, int x, int y) const noexcept {
    return values[(static_cast<std::size_t>(channel) * kPatchSize + static_cast<std::size_t>(y)) *
                      kPatchSize +
                  static_cast<std::size_t>(x)];
  }
};

/// Resamples the chosen channels of one slide once, then cuts patches.
class PatchExtractor {
 public:
  PatchExtractor(const SlideBundle& bundle, const std::vector<std::string>& channels,
                 double target_mpp = kTargetMicronsPerPixel);
  PatchExtractor(std::vector<RealGrid> source_channels, double source_mpp, std::string slide_id,
                 double target_mpp = kTargetMicronsPerPixel);

  /// `cx`, `cy` are in source pixels. Throws out_of_bounds when the centroid
  /// lies outside the source image.
  Patch extract(double cx, double cy, std::uint32_t instance_id, CellClass label) const;

  int source_width() const noexcept { return source_width_; }
  int source_height() const noexcept { return source_height_; }
  const std::vector<RealGrid>& resampled() const noexcept { return resampled_; }

 private:
  void resample_all(std::vector<RealGrid> source);

  std::vector<RealGrid> resampled_;
  double source_mpp_ = 0.0;
  double target_mpp_ = kTargetMicronsPerPixel;
  int source_width_ = 0;
  int source_height_ = 0;
  std::string slide_id_;
};

struct PatchRecord {
  std::size_t index = 0;
  std::string slide_id;
  std::uint32_t instance_id = 0;
  CellClass label = CellClass::unlabeled;
  double cx_um = 0.0;
  double cy_um = 0.0;
};

struct DatasetManifest {
  int patch_size = kPatchSize;
  int channels = 0;
  std::vector<std::string> channel_names;
  double microns_per_pixel = kTargetMicronsPerPixel;
  std::vector<PatchRecord> records;

  std::size_t feature_count() const noexcept {
    return static_cast<std::size_t>(channels) * patch_size * patch_size;
  }
  std::array<std::size_t, kCellClassCount> class_counts() const;

  void write(const std::filesystem::path& dir) const;
  static DatasetManifest read(const std::filesystem::path& dir);
};

/// Appends patches to `<dir>/patches.bin` (little-endian float32,
/// record-major) and keeps the manifest in step.
class DatasetWriter {
 public:
  DatasetWriter(const std::filesystem::path& dir, std::vector<std::string> channel_names,
                bool append);
  void add(const Patch& patch);
  /// Writes manifest.csv and dataset.json.
  void finish();
  const DatasetManifest& manifest() const noexcept { return manifest_; }

 private:
  std::filesystem::path dir_;
  DatasetManifest manifest_;
  std::ofstream blob_;
};

/// Dataset loaded fully into memory.
struct PatchDataset {
  DatasetManifest manifest;
  std::vector<float> features;  // records x feature_count

  std::size_t size() const noexcept { return manifest.records.size(); }
  std::span<const float> row(std::size_t i) const noexcept {
    const auto f = manifest.feature_count();
    return {features.data() + i * f, f};
  }
  static PatchDataset load(const std::filesystem::path& dir);
  /// Keeps only records whose slide id is listed; indices are renumbered.
  PatchDataset subset_slides(const std::vector<std::string>& slide_ids) const;
};

/// Draws a class uniformly among classes that have records, then a record
/// uniformly within that class, with replacement.
class BalancedSampler {
 public:
  /// Throws invalid_argument on an empty manifest.
  BalancedSampler(const DatasetManifest& manifest, std::uint64_t seed);

  std::size_t next();
  /// Classes with no records; they are never drawn.
  const std::vector<CellClass>& missing_classes() const noexcept { return missing_; }
  std::size_t available_classes() const noexcept { return by_class_.size(); }

 private:
  std::vector<std::vector<std::size_t>> by_class_;
  std::vector<CellClass> missing_;
  std::mt19937_64 rng_;
};

std::vector<std::size_t> balanced_sample(const DatasetManifest& manifest, std::uint64_t seed,
                                         std::size_t n);

}  // namespace cytogate::patches
