#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cytogate/cell_class.hpp"
#include "cytogate/patches.hpp"

namespace cytogate::classifier {

struct TrainConfig {
  std::size_t steps = 20000;
  std::size_t batch_size = 256;
  double learning_rate = 0.001;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Multinomial logistic regression over flattened patches.
class SoftmaxModel {
 public:
  SoftmaxModel() = default;
  SoftmaxModel(std::vector<CellClass> classes, std::size_t feature_count);

  std::size_t class_count() const noexcept { return classes_.size(); }
  std::size_t feature_count() const noexcept { return features_; }
  const std::vector<CellClass>& classes() const noexcept { return classes_; }
  /// Index of `label` in classes(), or -1.
  int class_index(CellClass label) const noexcept;

  /// Row-major class_count x feature_count.
  std::vector<double>& weights() noexcept { return weights_; }
  const std::vector<double>& weights() const noexcept { return weights_; }
  std::vector<double>& biases() noexcept { return biases_; }
  const std::vector<double>& biases() const noexcept { return biases_; }

  std::vector<double> logits(std::span<const float> x) const;
  std::vector<double> probabilities(std::span<const float> x) const;

  /// One-line JSON header, '\n', then little-endian float32 weights
  /// (row-major) followed by biases.
  void save(const std::filesystem::path& path) const;
  static SoftmaxModel load(const std::filesystem::path& path);

  friend bool operator==(const SoftmaxModel&, const SoftmaxModel&) = default;

 private:
  std::vector<CellClass> classes_;
  std::size_t features_ = 0;
  std::vector<double> weights_;
  std::vector<double> biases_;
};

/// In-place softmax with max subtraction.
void softmax(std::span<double> logits) noexcept;

/// Mean cross-entropy over `rows` samples (x is rows x feature_count,
/// targets are class indices). Gradients are written when non-null.
double loss_and_gradient(const SoftmaxModel& model, std::span<const float> x,
                         std::span<const int> targets, std::vector<double>* grad_weights,
                         std::vector<double>* grad_biases);

/// Plain gradient descent update; returns the loss before the step.
double gradient_step(SoftmaxModel& model, std::span<const float> x, std::span<const int> targets,
                     double learning_rate);

struct TrainResult {
  SoftmaxModel model;
  std::vector<double> loss_trace;
};

/// Zero-initialized model trained on batches from the balanced sampler.
/// Throws invalid_argument for fewer than two classes and divergence when
/// the loss stops being finite.
TrainResult train(const patches::PatchDataset& dataset, const TrainConfig& config);

struct Prediction {
  std::uint32_t instance_id = 0;
  std::string slide_id;
  CellClass label = CellClass::unlabeled;
  std::vector<double> probabilities;
};

std::vector<Prediction> predict(const SoftmaxModel& model, const patches::PatchDataset& dataset);

/// `instance_id,class,prob_<class>...`
void write_predictions_csv(const std::filesystem::path& path, const SoftmaxModel& model,
                           const std::vector<Prediction>& predictions);

}  // namespace cytogate::classifier
