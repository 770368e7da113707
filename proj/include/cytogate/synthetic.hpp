#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cytogate/cell_class.hpp"
#include "cytogate/cv_split.hpp"
#include "cytogate/grid.hpp"
#include "cytogate/palette.hpp"
#include "cytogate/slide_io.hpp"

namespace cytogate::synthetic {

/// Channels holding the rendered bright-field look of each cell.
inline const std::vector<std::string> kHeChannels = {"HE_R", "HE_G", "HE_B"};

struct SlideSpec {
  std::string slide_id = "S01";
  std::string patient_id = "P01";
  Site site = Site::ascending_colon;
  Disease disease = Disease::normal;
  int width = 768;
  int height = 768;
  double microns_per_pixel = 0.32;
  int spacing = 72;  // cell grid pitch in pixels
  int jitter = 4;
  int radius = 7;
  std::uint16_t positive_level = 3000;
  std::uint16_t negative_level = 200;
  std::uint16_t background_level = 50;
  double stain_noise = 100.0;
  double he_noise = 6.0;
  std::uint64_t seed = 1;
};

struct SyntheticSlide {
  SlideManifest manifest;
  std::vector<ChannelRaster> channels;
  LabelGrid instances;
  std::map<std::uint32_t, CellClass> truth;
};

/// The smallest stain set that the default cascade program maps to each class.
const std::vector<std::string>& canonical_stains(CellClass c);

/// Mean bright-field color of a class; classes differ in chromatic pattern,
/// not just brightness, so they stay apart after per-patch normalization.
Rgb he_color(CellClass c);

/// Every panel stain, in rule-program order.
const std::vector<std::string>& panel_stains();

/// Cells on a jittered grid, classes balanced and shuffled, one channel per
/// panel stain plus the HE_* channels.
SyntheticSlide make_slide(const SlideSpec& spec);

struct CohortSpec {
  int patients = 9;
  int slides_per_patient = 1;
  SlideSpec slide;  // template; ids, site, disease and seed are overwritten
  std::uint64_t seed = 1;
};

/// Writes one bundle per slide under `dir`, plus cohort.csv, a shared
/// thresholds.json and <slide>/truth.csv (instance_id,class). Patients
/// alternate site and disease so every state is represented.
cv::CohortTable write_cohort(const std::filesystem::path& dir, const CohortSpec& spec);

/// Threshold that separates positive from negative stain levels.
double separating_threshold(const SlideSpec& spec);

}  // namespace cytogate::synthetic
