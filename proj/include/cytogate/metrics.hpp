#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cytogate/grid.hpp"

namespace cytogate::metrics {

/// A ratio that may be undefined. Undefined ratios carry their counts and
/// report NaN; they are never folded into zero.
struct Ratio {
  std::int64_t numerator = 0;
  std::int64_t denominator = 0;

  bool defined() const noexcept { return denominator != 0; }
  double value() const noexcept {
    return defined() ? static_cast<double>(numerator) / static_cast<double>(denominator)
                     : std::numeric_limits<double>::quiet_NaN();
  }
  nlohmann::json to_json() const;
};

struct DetectionResult {
  std::int64_t predictions = 0;
  std::int64_t truths = 0;
  std::int64_t true_positive = 0;   // predictions touching any truth
  std::int64_t false_positive = 0;  // predictions touching none
  std::int64_t covered_truths = 0;
  std::int64_t false_negative = 0;  // truths touched by no prediction
  Ratio precision;
  Ratio recall;

  nlohmann::json to_json() const;
};

/// Any-overlap detection: predictions and truths are scored independently,
/// so several predictions may count against the same truth.
DetectionResult detection_pr(const LabelGrid& pred, const LabelGrid& truth);

struct MatchedPair {
  std::uint32_t pred = 0;
  std::uint32_t truth = 0;
  std::int64_t intersection = 0;
  std::int64_t union_area = 0;

  double iou() const noexcept {
    return static_cast<double>(intersection) / static_cast<double>(union_area);
  }
};

struct MatchedPairSet {
  std::vector<MatchedPair> pairs;  // ascending pred id
  std::vector<std::uint32_t> unmatched_pred;
  std::vector<std::uint32_t> unmatched_truth;
};

/// Pairs every (pred, truth) with IoU > 0.5. Such pairs are unique per
/// instance, so collecting them directly is exact.
MatchedPairSet match_instances(const LabelGrid& pred, const LabelGrid& truth);

using ClassLabels = std::map<std::uint32_t, std::string>;

/// Reads `instance_id,class`; an `outcome` column (label-cascade output) is
/// accepted in place of `class`.
ClassLabels read_class_labels(const std::filesystem::path& path);

struct PerClass {
  std::string name;
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  Ratio ppv;
  Ratio npv;
  Ratio prevalence;
  /// PPV / prevalence; NaN when either is undefined or prevalence is 0.
  double prevalence_normalized_ppv = std::numeric_limits<double>::quiet_NaN();
};

struct ClassMetrics {
  std::vector<std::string> classes;
  std::vector<PerClass> per_class;
  std::vector<std::vector<std::int64_t>> confusion;  // [truth][pred]
  Ratio accuracy;
  std::int64_t pairs = 0;

  nlohmann::json to_json() const;
};

/// Known cell class names first in canonical order, then others sorted.
std::vector<std::string> order_class_names(std::vector<std::string> names);

/// Class names of one matched pair.
struct LabelPair {
  std::string pred;
  std::string truth;
};

/// Looks up both classes of every matched pair. Throws invalid_argument if a
/// paired id has no class.
std::vector<LabelPair> label_pairs(const MatchedPairSet& pairs, const ClassLabels& pred_classes,
                                   const ClassLabels& truth_classes);

/// One-vs-rest metrics over matched pairs only.
ClassMetrics class_metrics(const std::vector<LabelPair>& labelled);
ClassMetrics class_metrics(const MatchedPairSet& pairs, const ClassLabels& pred_classes,
                           const ClassLabels& truth_classes);

using ParentMap = std::map<std::string, std::string>;

/// helper_t->lymphocyte, enterocyte->epithelial, progenitor->epithelial,
/// fibroblast->connective, stromal_undetermined->connective.
ParentMap default_parent_map();
ParentMap read_parent_map(const std::filesystem::path& path);

struct Bounded {
  std::string subclass;
  std::string parent;
  std::int64_t positives = 0;
  std::int64_t negatives = 0;
  std::int64_t parent_hits = 0;       // positives whose truth parent matches
  std::int64_t definite_negatives = 0;
  std::int64_t ambiguous_negatives = 0;
  Ratio ppv_upper;
  Ratio npv_lower;
  Ratio npv_upper;
};

struct BoundedMetrics {
  std::vector<Bounded> per_subclass;  // in parent-map key order
  nlohmann::json to_json() const;
};

/// Bounds on subclass PPV/NPV when truth is only known at parent level.
/// Ambiguous negatives (truth parent equals the subclass parent) are counted
/// as all-FN for npv_lower and all-TN for npv_upper.
BoundedMetrics bounded_metrics(const MatchedPairSet& pairs, const ClassLabels& pred_subclasses,
                               const ClassLabels& truth_parents, const ParentMap& parents);
/// Same, over pairs of (predicted subclass, truth parent).
BoundedMetrics bounded_metrics(const std::vector<LabelPair>& labelled, const ParentMap& parents);

struct FriedmanResult {
  double statistic = 0.0;
  int degrees_of_freedom = 0;
  double p_value = 1.0;
  std::vector<double> rank_sums;
  double tie_correction = 1.0;  // divisor applied to the uncorrected statistic
  bool small_sample = false;    // n < 10 or k < 4

  nlohmann::json to_json() const;
};

/// `values[block][treatment]`. Mid-ranks within each block; tie-corrected
/// statistic; p from the chi-square survival function with k-1 df.
FriedmanResult friedman_test(const std::vector<std::vector<double>>& values);

/// Regularized upper incomplete gamma Q(a, x).
double regularized_gamma_q(double a, double x);
double chi_square_survival(double statistic, double dof);

/// Mid-ranks (1-based) of the values, ties averaged.
std::vector<double> midranks(const std::vector<double>& values);

}  // namespace cytogate::metrics
