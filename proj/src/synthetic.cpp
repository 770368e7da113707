#include "cytogate/synthetic.hpp"

#include <algorithm>
#include <array>
#include <random>

#include "cytogate/cascade.hpp"
#include "cytogate/csv.hpp"
#include "cytogate/error.hpp"
#include "cytogate/instance_stats.hpp"

namespace cytogate::synthetic {

const std::vector<std::string>& canonical_stains(CellClass c) {
  static const std::array<std::vector<std::string>, kCellClassCount> table = {{
      {"Muc2"},                  // goblet
      {"CgA"},                   // enteroendocrine
      {"NaKATPase", "PanCK"},    // enterocyte
      {"SMA"},                   // fibroblast
      {"Vimentin"},              // stromal_undetermined
      {"Lysozyme", "CD45"},      // myeloid
      {"CD45", "CD3d", "CD4"},   // helper_t
      {"CD45", "CD3d", "CD8"},   // cytotoxic_t
      {"CD45", "CD3d"},          // t_cell_receptor
      {"CD45", "CD11B"},         // monocyte
      {"CD45", "CD68"},          // macrophage
      {"CD45", "CD20"},          // b_cell
      {"CD45"},                  // leukocyte
      {"Sox9", "NaKATPase"},     // progenitor
  }};
  if (is_sentinel(c)) throw Error(ErrorKind::invalid_argument, "sentinel outcomes have no stain set");
  return table[index_of(c)];
}

Rgb he_color(CellClass c) {
  // Chromatic direction per class in halves of full scale.
  static const std::array<std::array<int, 3>, kCellClassCount> direction = {{
      {2, 0, 0}, {0, 2, 0}, {0, 0, 2}, {2, 2, 0}, {2, 0, 2}, {0, 2, 2}, {2, 1, 0},
      {2, 0, 1}, {1, 2, 0}, {0, 2, 1}, {1, 0, 2}, {0, 1, 2}, {2, 2, 1}, {2, 1, 2},
  }};
  if (is_sentinel(c)) throw Error(ErrorKind::invalid_argument, "sentinel outcomes have no color");
  const auto& d = direction[index_of(c)];
  auto level = [](int half) { return static_cast<std::uint8_t>(30 + 100 * half); };
  return {level(d[0]), level(d[1]), level(d[2])};
}

const std::vector<std::string>& panel_stains() {
  static const std::vector<std::string> stains = cascade::table1_program().stains();
  return stains;
}

double separating_threshold(const SlideSpec& spec) {
  return (static_cast<double>(spec.positive_level) + spec.negative_level) / 2.0;
}

SyntheticSlide make_slide(const SlideSpec& spec) {
  if (spec.width <= 0 || spec.height <= 0 || spec.spacing <= 2 * (spec.radius + spec.jitter)) {
    throw Error(ErrorKind::invalid_argument, "synthetic slide geometry lets cells overlap");
  }
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> jitter(-spec.jitter, spec.jitter);

  SyntheticSlide out;
  auto& m = out.manifest;
  m.slide_id = spec.slide_id;
  m.patient_id = spec.patient_id;
  m.site = spec.site;
  m.disease = spec.disease;
  m.width_px = spec.width;
  m.height_px = spec.height;
  m.microns_per_pixel = spec.microns_per_pixel;
  m.bit_depth = 16;
  m.channels = panel_stains();
  m.channels.insert(m.channels.end(), kHeChannels.begin(), kHeChannels.end());

  out.instances = LabelGrid(spec.width, spec.height, 0);

  struct Cell {
    int cx, cy;
    CellClass cls;
  };
  std::vector<Cell> cells;
  const int half = spec.spacing / 2;
  for (int y = half; y + spec.radius + spec.jitter < spec.height; y += spec.spacing) {
    for (int x = half; x + spec.radius + spec.jitter < spec.width; x += spec.spacing) {
      cells.push_back({x + jitter(rng), y + jitter(rng), CellClass::unlabeled});
    }
  }
  std::vector<CellClass> classes(cells.size());
  for (std::size_t i = 0; i < classes.size(); ++i) {
    classes[i] = static_cast<CellClass>(i % kCellClassCount);
  }
  std::shuffle(classes.begin(), classes.end(), rng);

  const std::size_t stain_count = panel_stains().size();
  std::vector<IntensityGrid> grids(m.channels.size(), IntensityGrid(spec.width, spec.height, 0));
  auto noisy = [&](double mean, double sigma) {
    return static_cast<std::uint16_t>(std::clamp(std::lround(mean + sigma * unit(rng)), 0L, 65535L));
  };
  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      for (std::size_t c = 0; c < stain_count; ++c) {
        grids[c](x, y) = noisy(spec.background_level, spec.stain_noise / 4.0);
      }
      for (std::size_t c = 0; c < kHeChannels.size(); ++c) {
        grids[stain_count + c](x, y) = noisy(30.0, spec.he_noise);
      }
    }
  }

  std::uint32_t next_id = 1;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    auto& cell = cells[i];
    cell.cls = classes[i];
    const auto id = next_id++;
    out.truth[id] = cell.cls;
    std::vector<bool> positive(stain_count, false);
    for (const auto& s : canonical_stains(cell.cls)) {
      positive[static_cast<std::size_t>(
          std::find(panel_stains().begin(), panel_stains().end(), s) - panel_stains().begin())] = true;
    }
    // Every nucleus carries the nuclear counterstain.
    positive[cascade::table1_program().stain_index("DAPI")] = true;
    const Rgb color = he_color(cell.cls);
    const std::array<double, 3> rgb{static_cast<double>(color.r), static_cast<double>(color.g),
                                    static_cast<double>(color.b)};
    const int r2 = spec.radius * spec.radius;
    for (int dy = -spec.radius; dy <= spec.radius; ++dy) {
      for (int dx = -spec.radius; dx <= spec.radius; ++dx) {
        if (dx * dx + dy * dy > r2) continue;
        const int x = cell.cx + dx, y = cell.cy + dy;
        if (x < 0 || y < 0 || x >= spec.width || y >= spec.height) continue;
        out.instances(x, y) = id;
        for (std::size_t c = 0; c < stain_count; ++c) {
          grids[c](x, y) =
              noisy(positive[c] ? spec.positive_level : spec.negative_level, spec.stain_noise);
        }
        for (std::size_t c = 0; c < 3; ++c) grids[stain_count + c](x, y) = noisy(rgb[c], spec.he_noise);
      }
    }
  }

  for (std::size_t c = 0; c < m.channels.size(); ++c) {
    out.channels.push_back({m.channels[c], std::move(grids[c])});
  }
  return out;
}

cv::CohortTable write_cohort(const std::filesystem::path& dir, const CohortSpec& spec) {
  if (spec.patients < 1 || spec.slides_per_patient < 1) {
    throw Error(ErrorKind::invalid_argument, "cohort needs at least one patient and slide");
  }
  std::filesystem::create_directories(dir);
  cv::CohortTable cohort;
  ThresholdSet thresholds;
  for (const auto& s : panel_stains()) thresholds.values[s] = separating_threshold(spec.slide);
  thresholds.meta = {{"source", "synthetic"}};

  int serial = 0;
  for (int p = 0; p < spec.patients; ++p) {
    char patient[16];
    std::snprintf(patient, sizeof patient, "P%02d", p + 1);
    for (int k = 0; k < spec.slides_per_patient; ++k) {
      char slide[16];
      std::snprintf(slide, sizeof slide, "S%02d", ++serial);
      SlideSpec s = spec.slide;
      s.slide_id = slide;
      s.patient_id = patient;
      s.site = (p + k) % 2 == 0 ? Site::ascending_colon : Site::terminal_ileum;
      s.disease = (p / 2 + k) % 2 == 0 ? Disease::normal : Disease::diseased;
      s.seed = spec.seed * 1000003u + static_cast<std::uint64_t>(serial);
      const auto synth = make_slide(s);
      const auto bundle_dir = dir / slide;
      write_bundle(bundle_dir, synth.manifest, synth.channels, synth.instances);
      thresholds.save(bundle_dir / "thresholds.json");
      csv::Table truth;
      truth.header = {"instance_id", "class"};
      for (const auto& [id, cls] : synth.truth) {
        truth.rows.push_back({std::to_string(id), std::string(to_string(cls))});
      }
      csv::write(bundle_dir / "truth.csv", truth);
      cohort.slides.push_back({slide, patient, s.site, s.disease});
    }
  }
  thresholds.save(dir / "thresholds.json");
  cohort.write_csv(dir / "cohort.csv");
  return cohort;
}

}  // namespace cytogate::synthetic
