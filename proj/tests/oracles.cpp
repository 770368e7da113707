#include "oracles.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <boost/math/distributions/chi_squared.hpp>

namespace oracle {

const std::vector<std::string>& panel() {
  static const std::vector<std::string> names = {
      "NaKATPase", "PanCK", "Muc2", "CgA",  "Vimentin", "DAPI", "SMA", "Sox9", "OLFM4",
      "Lysozyme",  "CD45",  "CD20", "CD68", "CD11B",    "CD3d", "CD8", "CD4"};
  return names;
}

Stains from_mask(std::uint64_t m) {
  auto bit = [m](int i) { return ((m >> i) & 1u) != 0; };
  Stains s;
  s.NaKATPase = bit(0);
  s.PanCK = bit(1);
  s.Muc2 = bit(2);
  s.CgA = bit(3);
  s.Vimentin = bit(4);
  s.DAPI = bit(5);
  s.SMA = bit(6);
  s.Sox9 = bit(7);
  s.OLFM4 = bit(8);
  s.Lysozyme = bit(9);
  s.CD45 = bit(10);
  s.CD20 = bit(11);
  s.CD68 = bit(12);
  s.CD11B = bit(13);
  s.CD3d = bit(14);
  s.CD8 = bit(15);
  s.CD4 = bit(16);
  return s;
}

std::uint64_t mask_of(const std::vector<std::string>& positive) {
  std::uint64_t m = 0;
  for (const auto& name : positive) {
    const auto it = std::find(panel().begin(), panel().end(), name);
    if (it == panel().end()) throw std::invalid_argument("not a panel stain: " + name);
    m |= std::uint64_t{1} << (it - panel().begin());
  }
  return m;
}

cytogate::cascade::Evaluation table1(const Stains& s, CascadeVariant variant) {
  using cytogate::cascade::Evaluation;
  auto excluded = [](int step) { return Evaluation{CellClass::excluded, step, 0}; };

  bool epi = s.NaKATPase || s.PanCK || s.Muc2 || s.CgA;
  const bool stroma = s.Vimentin || s.SMA;
  if (epi && stroma) return excluded(3);
  const bool immune =
      s.CD45 || s.CD20 || s.CD68 || s.CD11B || s.Lysozyme || s.CD3d || s.CD8 || s.CD4;
  if (s.CD68 && (s.CD3d || s.CD20 || s.CD4 || s.CD8 || s.CD11B)) return excluded(5);
  if (s.CD11B && (s.CD3d || s.CD20 || s.CD4 || s.CD8 || s.CD68)) return excluded(6);
  if (s.CD20 && (s.CD3d || s.CD4 || s.CD8)) return excluded(7);
  if ((!s.CD3d && !s.CD45 && s.CD4) || (!s.CD3d && !s.CD45 && s.CD8) || (s.CD4 && s.CD8)) {
    return excluded(8);
  }
  const bool prog = s.Sox9 || s.OLFM4;
  if (!epi && !stroma && (variant.global_step10 || prog)) return excluded(10);
  if (s.Muc2 && (immune || prog || s.SMA)) return excluded(11);
  if (s.CgA && (immune || s.SMA || prog || s.Muc2)) return excluded(12);
  if (s.SMA && (variant.literal_step13 ? !immune : immune)) return excluded(13);
  if (immune && prog) return excluded(14);
  if (!epi && !stroma && !prog && !immune) return excluded(15);
  if (epi && immune) epi = false;  // leaves the epithelial group, stays alive

  const bool fibro_stromal = stroma && !immune;
  const bool t_negative = !s.CD3d && !s.CD4 && !s.CD8;
  const std::pair<bool, CellClass> finals[] = {
      {epi && s.Muc2 && !prog, CellClass::goblet},                            // 17
      {epi && s.CgA && !prog, CellClass::enteroendocrine},                    // 18
      {epi && !s.CgA && !prog && !s.Muc2, CellClass::enterocyte},             // 19
      {false, CellClass::unlabeled},                                          // 20 (grouping)
      {fibro_stromal && s.SMA && !prog, CellClass::fibroblast},               // 21
      {fibro_stromal && !s.SMA && !prog, CellClass::stromal_undetermined},    // 22
      {immune && s.Lysozyme && !s.CD68 && !s.CD11B && !prog && !s.CD20 && t_negative,
       CellClass::myeloid},                                                   // 23
      {immune && s.CD4 && !prog, CellClass::helper_t},                        // 24
      {immune && s.CD8 && !prog, CellClass::cytotoxic_t},                     // 25
      {immune && s.CD3d && !s.CD4 && !s.CD8, CellClass::t_cell_receptor},     // 26
      {immune && s.CD11B && t_negative && !prog, CellClass::monocyte},        // 27
      {immune && s.CD68 && t_negative && !prog, CellClass::macrophage},       // 28
      {immune && s.CD20 && !s.CD68 && t_negative && !prog, CellClass::b_cell},  // 29
      {immune && s.CD45 && !s.CD20 && !s.CD68 && t_negative && !prog && !s.CD11B && !s.Lysozyme,
       CellClass::leukocyte},                                                 // 30
      {prog, CellClass::progenitor},                                          // 31
  };
  Evaluation e;
  for (int i = 0; i < 15; ++i) {
    if (!finals[i].first) continue;
    if (e.step == 0) {
      e.outcome = finals[i].second;
      e.step = 17 + i;
    } else if (e.conflict_step == 0) {
      e.conflict_step = 17 + i;
    }
  }
  return e;
}

std::vector<TraceRow> read_trace_tables(const std::string& markdown_path) {
  std::ifstream in(markdown_path);
  if (!in) throw std::runtime_error("cannot open " + markdown_path);
  std::vector<TraceRow> rows;
  std::string line, section;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(' ');
    const auto e = s.find_last_not_of(' ');
    return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    if (line.rfind("## ", 0) == 0) {
      section = line.substr(3);
      continue;
    }
    if (line.empty() || line[0] != '|' || line.rfind("|---", 0) == 0) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line.substr(1));
    std::string cell;
    while (std::getline(ss, cell, '|')) cells.push_back(trim(cell));
    if (cells.size() < 3 || cells[0] == "positive stains") continue;
    TraceRow row;
    row.section = section;
    if (cells[0] != "none") {
      std::stringstream names(cells[0]);
      std::string name;
      while (std::getline(names, name, '+')) row.positive.push_back(trim(name));
    }
    row.outcome = cells[1];
    row.step = std::stoi(cells[2]);
    rows.push_back(std::move(row));
  }
  return rows;
}

cytogate::cv::CohortTable study_shaped_cohort() {
  using cytogate::Disease;
  using cytogate::Site;
  cytogate::cv::CohortTable t;
  int slide = 0;
  auto add = [&](int patient, Site site) {
    const auto disease = patient % 2 == 0 ? Disease::normal : Disease::diseased;
    t.slides.push_back({"S" + std::to_string(++slide), "P" + std::to_string(patient), site, disease});
  };
  for (int p = 0; p < 14; ++p) add(p, p < 7 ? Site::ascending_colon : Site::terminal_ileum);
  for (int p = 14; p < 19; ++p) {
    add(p, Site::ascending_colon);
    add(p, Site::terminal_ileum);
  }
  for (int k = 0; k < 4; ++k) add(19, k < 2 ? Site::ascending_colon : Site::terminal_ileum);
  return t;
}

std::map<std::uint32_t, NaiveStats> naive_stats(const cytogate::LabelGrid& labels,
                                                const std::vector<cytogate::IntensityGrid>& channels) {
  std::map<std::uint32_t, NaiveStats> out;
  std::map<std::uint32_t, std::vector<double>> sums;
  std::map<std::uint32_t, std::pair<double, double>> coords;
  for (int y = 0; y < labels.height(); ++y) {
    for (int x = 0; x < labels.width(); ++x) {
      const auto id = labels(x, y);
      if (id == 0) continue;
      auto& st = out[id];
      auto& s = sums[id];
      if (s.empty()) s.assign(channels.size(), 0.0);
      ++st.area;
      coords[id].first += x;
      coords[id].second += y;
      for (std::size_t c = 0; c < channels.size(); ++c) s[c] += channels[c](x, y);
    }
  }
  for (auto& [id, st] : out) {
    st.cx = coords[id].first / static_cast<double>(st.area);
    st.cy = coords[id].second / static_cast<double>(st.area);
    for (double v : sums[id]) st.means.push_back(v / static_cast<double>(st.area));
  }
  return out;
}

cytogate::LabelGrid random_labels(std::mt19937_64& rng, int w, int h, int max_instances) {
  cytogate::LabelGrid g(w, h, 0);
  std::uniform_int_distribution<int> count(1, max_instances);
  std::uniform_int_distribution<int> px(0, w - 1), py(0, h - 1);
  std::uniform_int_distribution<int> extent(1, std::max(1, std::min(w, h) / 4));
  std::uniform_int_distribution<std::uint32_t> id_jump(1, 5000);
  const int n = count(rng);
  std::uint32_t id = 0;
  for (int i = 0; i < n; ++i) {
    id += id_jump(rng);
    const int x0 = px(rng), y0 = py(rng), ew = extent(rng), eh = extent(rng);
    for (int y = y0; y < std::min(h, y0 + eh); ++y) {
      for (int x = x0; x < std::min(w, x0 + ew); ++x) g(x, y) = id;
    }
    // A few stray pixels so instances are not always rectangles.
    for (int k = 0; k < 3; ++k) g(px(rng), py(rng)) = id;
  }
  return g;
}

cytogate::IntensityGrid random_channel(std::mt19937_64& rng, int w, int h, std::uint16_t max_value) {
  cytogate::IntensityGrid g(w, h, 0);
  std::uniform_int_distribution<int> v(0, max_value);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) g(x, y) = static_cast<std::uint16_t>(v(rng));
  }
  return g;
}

std::pair<cytogate::LabelGrid, cytogate::LabelGrid> random_map_pair(std::mt19937_64& rng) {
  const int w = 16 + static_cast<int>(rng() % 40), h = 16 + static_cast<int>(rng() % 40);
  auto truth = random_labels(rng, w, h, 10);
  cytogate::LabelGrid pred(w, h, 0);
  const int dx = static_cast<int>(rng() % 3), dy = static_cast<int>(rng() % 2);
  for (int y = 0; y + dy < h; ++y) {
    for (int x = 0; x + dx < w; ++x) {
      if (truth(x, y)) pred(x + dx, y + dy) = truth(x, y) * 3 + 1;
    }
  }
  const auto extra = random_labels(rng, w, h, 4);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (extra.data()[i] && rng() % 2) pred.data()[i] = extra.data()[i] + 100000;
  }
  return {pred, truth};
}

std::set<PairKey> brute_force_matches(const cytogate::LabelGrid& pred,
                                      const cytogate::LabelGrid& truth) {
  std::map<std::uint32_t, std::set<std::size_t>> ps, ts;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred.data()[i]) ps[pred.data()[i]].insert(i);
    if (truth.data()[i]) ts[truth.data()[i]].insert(i);
  }
  std::set<PairKey> out;
  for (const auto& [p, pp] : ps) {
    for (const auto& [t, tp] : ts) {
      std::vector<std::size_t> inter;
      std::set_intersection(pp.begin(), pp.end(), tp.begin(), tp.end(), std::back_inserter(inter));
      const double iou = static_cast<double>(inter.size()) /
                         static_cast<double>(pp.size() + tp.size() - inter.size());
      if (iou > 0.5) out.insert({p, t});
    }
  }
  return out;
}

FriedmanReference friedman_reference(const std::vector<std::vector<double>>& values) {
  const double n = static_cast<double>(values.size());
  const double k = static_cast<double>(values.front().size());
  std::vector<double> rank_sums(values.front().size(), 0.0);
  double a1 = 0.0;
  for (const auto& row : values) {
    // Average rank by counting: rank = (#less) + (#equal + 1) / 2.
    for (std::size_t j = 0; j < row.size(); ++j) {
      double less = 0.0, equal = 0.0;
      for (double v : row) {
        less += v < row[j];
        equal += v == row[j];
      }
      const double r = less + (equal + 1.0) / 2.0;
      rank_sums[j] += r;
      a1 += r * r;
    }
  }
  const double c1 = n * k * (k + 1.0) * (k + 1.0) / 4.0;
  double sum_sq = 0.0;
  for (double r : rank_sums) sum_sq += r * r;
  if (a1 == c1) return {0.0, 1.0};
  const double t1 = (k - 1.0) * (sum_sq - n * c1) / (a1 - c1);
  const boost::math::chi_squared dist(k - 1.0);
  return {t1, boost::math::cdf(boost::math::complement(dist, t1))};
}

}  // namespace oracle
