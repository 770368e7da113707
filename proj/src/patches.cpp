#include "cytogate/patches.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "cytogate/csv.hpp"
#include "cytogate/error.hpp"

namespace cytogate::patches {

int resampled_extent(int extent, double src_mpp, double dst_mpp) {
  if (!(src_mpp > 0.0) || !(dst_mpp > 0.0)) {
    throw Error(ErrorKind::invalid_argument, "resolutions must be positive");
  }
  return static_cast<int>(std::lround(static_cast<double>(extent) * src_mpp / dst_mpp));
}

double cubic_kernel(double x, double a) noexcept {
  x = std::fabs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

int resampled_center(double coord, double src_mpp, double dst_mpp) noexcept {
  const double mapped = (coord + 0.5) * src_mpp / dst_mpp - 0.5;
  return static_cast<int>(std::floor(mapped + 0.5));
}

namespace {

struct Taps {
  std::array<int, 4> index;
  std::array<double, 4> weight;
};

std::vector<Taps> axis_taps(int out_extent, int in_extent, double step, double a) {
  std::vector<Taps> taps(static_cast<std::size_t>(out_extent));
  for (int o = 0; o < out_extent; ++o) {
    const double s = (o + 0.5) * step - 0.5;
    const double base = std::floor(s);
    const double t = s - base;
    auto& tp = taps[static_cast<std::size_t>(o)];
    double sum = 0.0;
    for (int k = 0; k < 4; ++k) {
      const int idx = static_cast<int>(base) - 1 + k;
      tp.index[k] = std::clamp(idx, 0, in_extent - 1);
      tp.weight[k] = cubic_kernel(t - (k - 1), a);
      sum += tp.weight[k];
    }
    for (auto& w : tp.weight) w /= sum;
  }
  return taps;
}

}  // namespace

RealGrid resample_bicubic(const RealGrid& src, double src_mpp, double dst_mpp,
                          const ResampleOptions& options) {
  const int out_w = resampled_extent(src.width(), src_mpp, dst_mpp);
  const int out_h = resampled_extent(src.height(), src_mpp, dst_mpp);
  if (out_w <= 0 || out_h <= 0 || src.empty()) {
    throw Error(ErrorKind::invalid_argument, "resampling yields a zero-sized image");
  }
  const double step = dst_mpp / src_mpp;
  const auto xt = axis_taps(out_w, src.width(), step, options.kernel_a);
  const auto yt = axis_taps(out_h, src.height(), step, options.kernel_a);

  // Horizontal pass into double precision, then vertical.
  std::vector<double> horizontal(static_cast<std::size_t>(out_w) * src.height());
  for (int y = 0; y < src.height(); ++y) {
    const auto row = src.row(y);
    double* dst = horizontal.data() + static_cast<std::size_t>(y) * out_w;
    for (int x = 0; x < out_w; ++x) {
      const auto& tp = xt[static_cast<std::size_t>(x)];
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) acc += tp.weight[k] * row[static_cast<std::size_t>(tp.index[k])];
      dst[x] = acc;
    }
  }
  float lo = std::numeric_limits<float>::max();
  float hi = std::numeric_limits<float>::lowest();
  if (options.clamp) {
    const auto [mn, mx] = std::minmax_element(src.data().begin(), src.data().end());
    lo = *mn;
    hi = *mx;
  }
  RealGrid out(out_w, out_h);
  for (int y = 0; y < out_h; ++y) {
    const auto& tp = yt[static_cast<std::size_t>(y)];
    auto dst = out.row(y);
    for (int x = 0; x < out_w; ++x) {
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) {
        acc += tp.weight[k] * horizontal[static_cast<std::size_t>(tp.index[k]) * out_w + x];
      }
      float v = static_cast<float>(acc);
      if (options.clamp) v = std::clamp(v, lo, hi);
      dst[static_cast<std::size_t>(x)] = v;
    }
  }
  return out;
}

void normalize(std::span<float> values) noexcept {
  if (values.empty()) return;
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  const float lo = *mn;
  const float range = *mx - lo;
  if (!(range > 0.0f)) {
    std::fill(values.begin(), values.end(), 0.0f);
    return;
  }
  for (auto& v : values) v = std::clamp((v - lo) / range, 0.0f, 1.0f);
}

PatchExtractor::PatchExtractor(const SlideBundle& bundle, const std::vector<std::string>& channels,
                               double target_mpp)
    : source_mpp_(bundle.manifest().microns_per_pixel),
      target_mpp_(target_mpp),
      source_width_(bundle.width()),
      source_height_(bundle.height()),
      slide_id_(bundle.manifest().slide_id) {
  if (channels.empty()) throw Error(ErrorKind::invalid_argument, "patch extraction needs channels");
  std::vector<RealGrid> source;
  source.reserve(channels.size());
  for (const auto& c : channels) source.push_back(grid_cast<float>(bundle.read_channel(c)));
  resample_all(std::move(source));
}

PatchExtractor::PatchExtractor(std::vector<RealGrid> source_channels, double source_mpp,
                               std::string slide_id, double target_mpp)
    : source_mpp_(source_mpp), target_mpp_(target_mpp), slide_id_(std::move(slide_id)) {
  if (source_channels.empty()) {
    throw Error(ErrorKind::invalid_argument, "patch extraction needs channels");
  }
  source_width_ = source_channels.front().width();
  source_height_ = source_channels.front().height();
  for (const auto& g : source_channels) {
    if (g.width() != source_width_ || g.height() != source_height_) {
      throw Error(ErrorKind::dimension_mismatch, "patch source channels differ in size");
    }
  }
  resample_all(std::move(source_channels));
}

void PatchExtractor::resample_all(std::vector<RealGrid> source) {
  resampled_.clear();
  for (auto& g : source) {
    resampled_.push_back(source_mpp_ == target_mpp_ ? std::move(g)
                                                    : resample_bicubic(g, source_mpp_, target_mpp_));
  }
}

Patch PatchExtractor::extract(double cx, double cy, std::uint32_t instance_id,
                              CellClass label) const {
  if (!(cx >= -0.5 && cx < source_width_ - 0.5 && cy >= -0.5 && cy < source_height_ - 0.5)) {
    throw Error(ErrorKind::out_of_bounds, "centroid (" + csv::format_double(cx) + ", " +
                                              csv::format_double(cy) + ") lies outside the image");
  }
  const int ccx = resampled_center(cx, source_mpp_, target_mpp_);
  const int ccy = resampled_center(cy, source_mpp_, target_mpp_);
  constexpr int half = kPatchSize / 2;

  Patch p;
  p.channels = static_cast<int>(resampled_.size());
  p.instance_id = instance_id;
  p.label = label;
  p.slide_id = slide_id_;
  p.cx_um = cx * source_mpp_;
  p.cy_um = cy * source_mpp_;
  p.values.resize(static_cast<std::size_t>(p.channels) * kPatchSize * kPatchSize);
  std::size_t k = 0;
  for (const auto& g : resampled_) {
    for (int dy = -half; dy <= half; ++dy) {
      const int y = std::clamp(ccy + dy, 0, g.height() - 1);
      for (int dx = -half; dx <= half; ++dx) {
        const int x = std::clamp(ccx + dx, 0, g.width() - 1);
        p.values[k++] = g(x, y);
      }
    }
  }
  normalize(p.values);
  return p;
}

std::array<std::size_t, kCellClassCount> DatasetManifest::class_counts() const {
  std::array<std::size_t, kCellClassCount> counts{};
  for (const auto& r : records) ++counts[index_of(r.label)];
  return counts;
}

void DatasetManifest::write(const std::filesystem::path& dir) const {
  csv::Table t;
  t.header = {"index", "slide_id", "instance_id", "class", "cx_um", "cy_um"};
  for (const auto& r : records) {
    t.rows.push_back({std::to_string(r.index), r.slide_id, std::to_string(r.instance_id),
                      std::string(to_string(r.label)), csv::format_double(r.cx_um),
                      csv::format_double(r.cy_um)});
  }
  csv::write(dir / "manifest.csv", t);

  nlohmann::json j;
  j["patch_size"] = patch_size;
  j["channels"] = channel_names;
  j["microns_per_pixel"] = microns_per_pixel;
  j["records"] = records.size();
  j["patch_file"] = "patches.bin";
  j["dtype"] = "float32le";
  nlohmann::json counts = nlohmann::json::object();
  const auto c = class_counts();
  for (std::size_t i = 0; i < kCellClassCount; ++i) counts[std::string(kOutcomeNames[i])] = c[i];
  j["class_counts"] = counts;
  std::ofstream out(dir / "dataset.json", std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write dataset.json in " + dir.string());
  out << j.dump(2) << '\n';
}

DatasetManifest DatasetManifest::read(const std::filesystem::path& dir) {
  DatasetManifest m;
  std::ifstream in(dir / "dataset.json");
  if (!in) throw Error(ErrorKind::io, "cannot open " + (dir / "dataset.json").string());
  try {
    const auto j = nlohmann::json::parse(in);
    m.patch_size = j.at("patch_size").get<int>();
    m.channel_names = j.at("channels").get<std::vector<std::string>>();
    m.channels = static_cast<int>(m.channel_names.size());
    m.microns_per_pixel = j.at("microns_per_pixel").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::format, std::string("dataset.json: ") + e.what());
  }
  const auto t = csv::read(dir / "manifest.csv");
  const auto ci = t.column("index"), cs = t.column("slide_id"), cid = t.column("instance_id"),
             cc = t.column("class"), cx = t.column("cx_um"), cy = t.column("cy_um");
  for (const auto& f : t.rows) {
    PatchRecord r;
    r.index = static_cast<std::size_t>(csv::parse_int(f[ci]));
    r.slide_id = f[cs];
    r.instance_id = static_cast<std::uint32_t>(csv::parse_int(f[cid]));
    const auto label = parse_cell_class(f[cc]);
    if (!label) throw Error(ErrorKind::unknown_class, "unknown class '" + f[cc] + "'");
    r.label = *label;
    r.cx_um = csv::parse_double(f[cx]);
    r.cy_um = csv::parse_double(f[cy]);
    if (r.index != m.records.size()) throw Error(ErrorKind::format, "manifest indices out of order");
    m.records.push_back(std::move(r));
  }
  return m;
}

DatasetWriter::DatasetWriter(const std::filesystem::path& dir, std::vector<std::string> channel_names,
                             bool append)
    : dir_(dir) {
  std::filesystem::create_directories(dir);
  if (append && std::filesystem::exists(dir / "dataset.json")) {
    manifest_ = DatasetManifest::read(dir);
    if (manifest_.channel_names != channel_names) {
      throw Error(ErrorKind::invalid_argument, "appended patches must use the same channels");
    }
  } else {
    append = false;
    manifest_.channel_names = std::move(channel_names);
    manifest_.channels = static_cast<int>(manifest_.channel_names.size());
  }
  blob_.open(dir / "patches.bin", std::ios::binary | (append ? std::ios::app : std::ios::trunc));
  if (!blob_) throw Error(ErrorKind::io, "cannot write " + (dir / "patches.bin").string());
}

void DatasetWriter::add(const Patch& patch) {
  if (patch.channels != manifest_.channels || is_sentinel(patch.label)) {
    throw Error(ErrorKind::invalid_argument, "patch does not fit the dataset");
  }
  for (float v : patch.values) {
    auto bits = std::bit_cast<std::uint32_t>(v);
    std::array<char, 4> le{static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                           static_cast<char>((bits >> 16) & 0xff), static_cast<char>(bits >> 24)};
    blob_.write(le.data(), 4);
  }
  if (!blob_) throw Error(ErrorKind::io, "patch write failed");
  manifest_.records.push_back({manifest_.records.size(), patch.slide_id, patch.instance_id,
                               patch.label, patch.cx_um, patch.cy_um});
}

void DatasetWriter::finish() {
  blob_.flush();
  if (!blob_) throw Error(ErrorKind::io, "patch write failed");
  manifest_.write(dir_);
}

PatchDataset PatchDataset::load(const std::filesystem::path& dir) {
  PatchDataset ds;
  ds.manifest = DatasetManifest::read(dir);
  const auto f = ds.manifest.feature_count();
  const auto expected = ds.manifest.records.size() * f * 4;
  const auto path = dir / "patches.bin";
  if (!std::filesystem::exists(path) || std::filesystem::file_size(path) != expected) {
    throw Error(ErrorKind::format, "patches.bin size does not match the manifest");
  }
  std::ifstream in(path, std::ios::binary);
  std::vector<unsigned char> raw(expected);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw Error(ErrorKind::io, "cannot read " + path.string());
  ds.features.resize(ds.manifest.records.size() * f);
  for (std::size_t i = 0; i < ds.features.size(); ++i) {
    const std::uint32_t bits = std::uint32_t{raw[4 * i]} | (std::uint32_t{raw[4 * i + 1]} << 8) |
                               (std::uint32_t{raw[4 * i + 2]} << 16) |
                               (std::uint32_t{raw[4 * i + 3]} << 24);
    ds.features[i] = std::bit_cast<float>(bits);
  }
  return ds;
}

PatchDataset PatchDataset::subset_slides(const std::vector<std::string>& slide_ids) const {
  PatchDataset out;
  out.manifest = manifest;
  out.manifest.records.clear();
  for (std::size_t i = 0; i < size(); ++i) {
    const auto& r = manifest.records[i];
    if (std::find(slide_ids.begin(), slide_ids.end(), r.slide_id) == slide_ids.end()) continue;
    auto copy = r;
    copy.index = out.manifest.records.size();
    out.manifest.records.push_back(std::move(copy));
    const auto src = row(i);
    out.features.insert(out.features.end(), src.begin(), src.end());
  }
  return out;
}

BalancedSampler::BalancedSampler(const DatasetManifest& manifest, std::uint64_t seed) : rng_(seed) {
  if (manifest.records.empty()) throw Error(ErrorKind::invalid_argument, "empty dataset manifest");
  std::array<std::vector<std::size_t>, kCellClassCount> buckets;
  for (const auto& r : manifest.records) buckets[index_of(r.label)].push_back(r.index);
  for (std::size_t c = 0; c < kCellClassCount; ++c) {
    if (buckets[c].empty()) {
      missing_.push_back(static_cast<CellClass>(c));
    } else {
      by_class_.push_back(std::move(buckets[c]));
    }
  }
}

std::size_t BalancedSampler::next() {
  std::uniform_int_distribution<std::size_t> pick_class(0, by_class_.size() - 1);
  const auto& bucket = by_class_[pick_class(rng_)];
  std::uniform_int_distribution<std::size_t> pick_record(0, bucket.size() - 1);
  return bucket[pick_record(rng_)];
}

std::vector<std::size_t> balanced_sample(const DatasetManifest& manifest, std::uint64_t seed,
                                         std::size_t n) {
  BalancedSampler sampler(manifest, seed);
  std::vector<std::size_t> draws(n);
  for (auto& d : draws) d = sampler.next();
  return draws;
}

}  // namespace cytogate::patches
