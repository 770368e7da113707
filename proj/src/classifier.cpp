#include "cytogate/classifier.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "cytogate/csv.hpp"
#include "cytogate/error.hpp"

namespace cytogate::classifier {

void TrainConfig::validate() const {
  if (steps == 0 || batch_size == 0) {
    throw Error(ErrorKind::invalid_argument, "steps and batch size must be positive");
  }
  if (!std::isfinite(learning_rate) || learning_rate < 0.0) {
    throw Error(ErrorKind::invalid_argument, "learning rate must be finite and non-negative");
  }
}

SoftmaxModel::SoftmaxModel(std::vector<CellClass> classes, std::size_t feature_count)
    : classes_(std::move(classes)),
      features_(feature_count),
      weights_(classes_.size() * feature_count, 0.0),
      biases_(classes_.size(), 0.0) {}

int SoftmaxModel::class_index(CellClass label) const noexcept {
  const auto it = std::find(classes_.begin(), classes_.end(), label);
  return it == classes_.end() ? -1 : static_cast<int>(it - classes_.begin());
}

std::vector<double> SoftmaxModel::logits(std::span<const float> x) const {
  if (x.size() != features_) {
    throw Error(ErrorKind::dimension_mismatch, "feature count " + std::to_string(x.size()) +
                                                   " does not match model (" +
                                                   std::to_string(features_) + ")");
  }
  std::vector<double> z(biases_);
  for (std::size_t k = 0; k < z.size(); ++k) {
    const double* w = weights_.data() + k * features_;
    double acc = 0.0;
    for (std::size_t f = 0; f < features_; ++f) acc += w[f] * x[f];
    z[k] += acc;
  }
  return z;
}

std::vector<double> SoftmaxModel::probabilities(std::span<const float> x) const {
  auto z = logits(x);
  softmax(z);
  return z;
}

void softmax(std::span<double> logits) noexcept {
  if (logits.empty()) return;
  const double peak = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (auto& v : logits) {
    v = std::exp(v - peak);
    sum += v;
  }
  for (auto& v : logits) v /= sum;
}

double loss_and_gradient(const SoftmaxModel& model, std::span<const float> x,
                         std::span<const int> targets, std::vector<double>* grad_weights,
                         std::vector<double>* grad_biases) {
  const std::size_t features = model.feature_count();
  const std::size_t classes = model.class_count();
  const std::size_t rows = targets.size();
  if (rows == 0 || x.size() != rows * features) {
    throw Error(ErrorKind::dimension_mismatch, "batch shape does not match the model");
  }
  if (grad_weights) grad_weights->assign(classes * features, 0.0);
  if (grad_biases) grad_biases->assign(classes, 0.0);
  const double scale = 1.0 / static_cast<double>(rows);
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto sample = x.subspan(r * features, features);
    auto z = model.logits(sample);
    const double peak = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - peak);
    const auto target = static_cast<std::size_t>(targets[r]);
    if (target >= classes) throw Error(ErrorKind::invalid_argument, "target class out of range");
    loss += (std::log(sum) + peak - z[target]) * scale;
    if (!grad_weights && !grad_biases) continue;
    for (std::size_t k = 0; k < classes; ++k) {
      const double p = std::exp(z[k] - peak) / sum;
      const double delta = (p - (k == target ? 1.0 : 0.0)) * scale;
      if (grad_biases) (*grad_biases)[k] += delta;
      if (grad_weights) {
        double* g = grad_weights->data() + k * features;
        for (std::size_t f = 0; f < features; ++f) g[f] += delta * sample[f];
      }
    }
  }
  return loss;
}

double gradient_step(SoftmaxModel& model, std::span<const float> x, std::span<const int> targets,
                     double learning_rate) {
  std::vector<double> gw;
  std::vector<double> gb;
  const double loss = loss_and_gradient(model, x, targets, &gw, &gb);
  if (learning_rate != 0.0) {
    auto& w = model.weights();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= learning_rate * gw[i];
    auto& b = model.biases();
    for (std::size_t i = 0; i < b.size(); ++i) b[i] -= learning_rate * gb[i];
  }
  return loss;
}

TrainResult train(const patches::PatchDataset& dataset, const TrainConfig& config) {
  config.validate();
  if (dataset.size() == 0) throw Error(ErrorKind::invalid_argument, "empty training dataset");
  std::vector<CellClass> classes;
  const auto counts = dataset.manifest.class_counts();
  for (std::size_t c = 0; c < kCellClassCount; ++c) {
    if (counts[c] > 0) classes.push_back(static_cast<CellClass>(c));
  }
  if (classes.size() < 2) {
    throw Error(ErrorKind::invalid_argument, "training needs at least two classes");
  }
  TrainResult result{SoftmaxModel(classes, dataset.manifest.feature_count()), {}};
  result.loss_trace.reserve(config.steps);

  patches::BalancedSampler sampler(dataset.manifest, config.seed);
  const std::size_t features = dataset.manifest.feature_count();
  std::vector<float> batch(config.batch_size * features);
  std::vector<int> targets(config.batch_size);
  for (std::size_t step = 0; step < config.steps; ++step) {
    for (std::size_t i = 0; i < config.batch_size; ++i) {
      const auto idx = sampler.next();
      const auto src = dataset.row(idx);
      std::copy(src.begin(), src.end(), batch.begin() + static_cast<std::ptrdiff_t>(i * features));
      targets[i] = result.model.class_index(dataset.manifest.records[idx].label);
    }
    const double loss = gradient_step(result.model, batch, targets, config.learning_rate);
    if (!std::isfinite(loss)) {
      throw Error(ErrorKind::divergence,
                  "loss became non-finite at step " + std::to_string(step) +
                      "; lower the learning rate (currently " +
                      csv::format_double(config.learning_rate) + ")");
    }
    result.loss_trace.push_back(loss);
  }
  return result;
}

std::vector<Prediction> predict(const SoftmaxModel& model, const patches::PatchDataset& dataset) {
  if (dataset.manifest.feature_count() != model.feature_count()) {
    throw Error(ErrorKind::dimension_mismatch, "dataset feature count does not match the model");
  }
  std::vector<Prediction> out(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    auto& p = out[i];
    p.instance_id = dataset.manifest.records[i].instance_id;
    p.slide_id = dataset.manifest.records[i].slide_id;
    p.probabilities = model.probabilities(dataset.row(i));
    const auto best = std::max_element(p.probabilities.begin(), p.probabilities.end());
    p.label = model.classes()[static_cast<std::size_t>(best - p.probabilities.begin())];
  }
  return out;
}

void write_predictions_csv(const std::filesystem::path& path, const SoftmaxModel& model,
                           const std::vector<Prediction>& predictions) {
  csv::Table t;
  t.header = {"instance_id", "class"};
  for (auto c : model.classes()) t.header.push_back("prob_" + std::string(to_string(c)));
  for (const auto& p : predictions) {
    std::vector<std::string> f{std::to_string(p.instance_id), std::string(to_string(p.label))};
    for (double v : p.probabilities) f.push_back(csv::format_double(v));
    t.rows.push_back(std::move(f));
  }
  csv::write(path, t);
}

void SoftmaxModel::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["format"] = "cytogate-softmax";
  header["version"] = 1;
  std::vector<std::string> names;
  for (auto c : classes_) names.emplace_back(to_string(c));
  header["classes"] = names;
  header["feature_count"] = features_;
  header["dtype"] = "float32le";
  header["layout"] = "weights[class][feature] then biases[class]";
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  out << header.dump() << '\n';
  auto emit = [&out](double v) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    const char le[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                        static_cast<char>((bits >> 16) & 0xff), static_cast<char>(bits >> 24)};
    out.write(le, 4);
  };
  for (double w : weights_) emit(w);
  for (double b : biases_) emit(b);
  if (!out) throw Error(ErrorKind::io, "write failed " + path.string());
}

SoftmaxModel SoftmaxModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  SoftmaxModel m;
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.at("format") != "cytogate-softmax") throw Error(ErrorKind::format, "not a model file");
    std::vector<CellClass> classes;
    for (const auto& n : header.at("classes").get<std::vector<std::string>>()) {
      const auto c = parse_cell_class(n);
      if (!c) throw Error(ErrorKind::unknown_class, "unknown class '" + n + "' in model");
      classes.push_back(*c);
    }
    m = SoftmaxModel(std::move(classes), header.at("feature_count").get<std::size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::format, path.string() + ": " + e.what());
  }
  auto take = [&in, &path]() {
    unsigned char le[4];
    in.read(reinterpret_cast<char*>(le), 4);
    if (!in) throw Error(ErrorKind::format, "truncated model blob in " + path.string());
    const std::uint32_t bits = std::uint32_t{le[0]} | (std::uint32_t{le[1]} << 8) |
                               (std::uint32_t{le[2]} << 16) | (std::uint32_t{le[3]} << 24);
    return static_cast<double>(std::bit_cast<float>(bits));
  };
  for (auto& w : m.weights_) w = take();
  for (auto& b : m.biases_) b = take();
  for (double v : m.weights_) {
    if (!std::isfinite(v)) throw Error(ErrorKind::format, "non-finite model parameter");
  }
  return m;
}

}  // namespace cytogate::classifier
