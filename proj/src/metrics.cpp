#include "cytogate/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <unordered_map>

#include "cytogate/cell_class.hpp"
#include "cytogate/csv.hpp"
#include "cytogate/error.hpp"

namespace cytogate::metrics {

nlohmann::json Ratio::to_json() const {
  nlohmann::json j;
  j["value"] = defined() ? nlohmann::json(value()) : nlohmann::json(nullptr);
  j["numerator"] = numerator;
  j["denominator"] = denominator;
  j["undefined"] = !defined();
  return j;
}

namespace {

void check_same_shape(const LabelGrid& a, const LabelGrid& b) {
  if (a.width() != b.width() || a.height() != b.height()) {
    throw Error(ErrorKind::dimension_mismatch,
                "instance maps differ in size: " + std::to_string(a.width()) + "x" +
                    std::to_string(a.height()) + " vs " + std::to_string(b.width()) + "x" +
                    std::to_string(b.height()));
  }
}

nlohmann::json nan_safe(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

}  // namespace

nlohmann::json DetectionResult::to_json() const {
  return {{"predictions", predictions},       {"truths", truths},
          {"true_positive", true_positive},   {"false_positive", false_positive},
          {"covered_truths", covered_truths}, {"false_negative", false_negative},
          {"precision", precision.to_json()}, {"recall", recall.to_json()}};
}

DetectionResult detection_pr(const LabelGrid& pred, const LabelGrid& truth) {
  check_same_shape(pred, truth);
  std::set<std::uint32_t> pred_ids, truth_ids, touching, covered;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto p = pred.data()[i];
    const auto t = truth.data()[i];
    if (p) pred_ids.insert(p);
    if (t) truth_ids.insert(t);
    if (p && t) {
      touching.insert(p);
      covered.insert(t);
    }
  }
  DetectionResult r;
  r.predictions = static_cast<std::int64_t>(pred_ids.size());
  r.truths = static_cast<std::int64_t>(truth_ids.size());
  r.true_positive = static_cast<std::int64_t>(touching.size());
  r.false_positive = r.predictions - r.true_positive;
  r.covered_truths = static_cast<std::int64_t>(covered.size());
  r.false_negative = r.truths - r.covered_truths;
  r.precision = {r.true_positive, r.predictions};
  r.recall = {r.covered_truths, r.truths};
  return r;
}

MatchedPairSet match_instances(const LabelGrid& pred, const LabelGrid& truth) {
  check_same_shape(pred, truth);
  std::unordered_map<std::uint32_t, std::int64_t> pred_area, truth_area;
  std::unordered_map<std::uint64_t, std::int64_t> overlap;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto p = pred.data()[i];
    const auto t = truth.data()[i];
    if (p) ++pred_area[p];
    if (t) ++truth_area[t];
    if (p && t) ++overlap[(std::uint64_t{p} << 32) | t];
  }
  MatchedPairSet out;
  std::set<std::uint32_t> matched_pred, matched_truth;
  for (const auto& [key, inter] : overlap) {
    const auto p = static_cast<std::uint32_t>(key >> 32);
    const auto t = static_cast<std::uint32_t>(key & 0xffffffffu);
    const std::int64_t uni = pred_area[p] + truth_area[t] - inter;
    if (2 * inter > uni) {
      out.pairs.push_back({p, t, inter, uni});
      matched_pred.insert(p);
      matched_truth.insert(t);
    }
  }
  std::sort(out.pairs.begin(), out.pairs.end(),
            [](const MatchedPair& a, const MatchedPair& b) { return a.pred < b.pred; });
  for (const auto& [id, area] : pred_area) {
    if (!matched_pred.contains(id)) out.unmatched_pred.push_back(id);
  }
  for (const auto& [id, area] : truth_area) {
    if (!matched_truth.contains(id)) out.unmatched_truth.push_back(id);
  }
  std::sort(out.unmatched_pred.begin(), out.unmatched_pred.end());
  std::sort(out.unmatched_truth.begin(), out.unmatched_truth.end());
  return out;
}

ClassLabels read_class_labels(const std::filesystem::path& path) {
  const auto table = csv::read(path);
  const auto id_col = table.column("instance_id");
  const auto class_col = table.has_column("class") ? table.column("class") : table.column("outcome");
  ClassLabels labels;
  for (const auto& row : table.rows) {
    const auto id = csv::parse_int(row[id_col]);
    if (id <= 0 || id > 0xffffffffLL) {
      throw Error(ErrorKind::format, path.string() + ": bad instance id " + row[id_col]);
    }
    if (!labels.emplace(static_cast<std::uint32_t>(id), row[class_col]).second) {
      throw Error(ErrorKind::format, path.string() + ": duplicate instance id " + row[id_col]);
    }
  }
  return labels;
}

std::vector<std::string> order_class_names(std::vector<std::string> names) {
  std::sort(names.begin(), names.end(), [](const std::string& a, const std::string& b) {
    const auto ca = parse_outcome(a);
    const auto cb = parse_outcome(b);
    if (ca && cb) return index_of(*ca) < index_of(*cb);
    if (ca || cb) return ca.has_value();
    return a < b;
  });
  names.erase(std::unique(names.begin(), names.end()), names.end());
  return names;
}

namespace {

const std::string& label_of(const ClassLabels& labels, std::uint32_t id, const char* side) {
  const auto it = labels.find(id);
  if (it == labels.end()) {
    throw Error(ErrorKind::invalid_argument,
                std::string(side) + " instance " + std::to_string(id) + " has no class");
  }
  return it->second;
}

}  // namespace

std::vector<LabelPair> label_pairs(const MatchedPairSet& pairs, const ClassLabels& pred_classes,
                                   const ClassLabels& truth_classes) {
  std::vector<LabelPair> out;
  out.reserve(pairs.pairs.size());
  for (const auto& p : pairs.pairs) {
    out.push_back({label_of(pred_classes, p.pred, "predicted"),
                   label_of(truth_classes, p.truth, "truth")});
  }
  return out;
}

ClassMetrics class_metrics(const MatchedPairSet& pairs, const ClassLabels& pred_classes,
                           const ClassLabels& truth_classes) {
  return class_metrics(label_pairs(pairs, pred_classes, truth_classes));
}

ClassMetrics class_metrics(const std::vector<LabelPair>& labelled) {
  std::vector<std::string> names;
  for (const auto& p : labelled) {
    names.push_back(p.pred);
    names.push_back(p.truth);
  }
  ClassMetrics m;
  m.classes = order_class_names(std::move(names));
  const std::size_t k = m.classes.size();
  auto index = [&m](const std::string& name) {
    return static_cast<std::size_t>(std::find(m.classes.begin(), m.classes.end(), name) -
                                    m.classes.begin());
  };
  m.confusion.assign(k, std::vector<std::int64_t>(k, 0));
  for (const auto& p : labelled) ++m.confusion[index(p.truth)][index(p.pred)];
  m.pairs = static_cast<std::int64_t>(labelled.size());

  std::int64_t trace = 0;
  for (std::size_t c = 0; c < k; ++c) {
    PerClass pc;
    pc.name = m.classes[c];
    std::int64_t row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += m.confusion[c][j];
      col += m.confusion[j][c];
    }
    pc.tp = m.confusion[c][c];
    pc.fp = col - pc.tp;
    pc.fn = row - pc.tp;
    pc.tn = m.pairs - pc.tp - pc.fp - pc.fn;
    pc.ppv = {pc.tp, pc.tp + pc.fp};
    pc.npv = {pc.tn, pc.tn + pc.fn};
    pc.prevalence = {row, m.pairs};
    if (pc.ppv.defined() && pc.prevalence.defined() && row > 0) {
      pc.prevalence_normalized_ppv = pc.ppv.value() / pc.prevalence.value();
    }
    trace += pc.tp;
    m.per_class.push_back(std::move(pc));
  }
  m.accuracy = {trace, m.pairs};
  return m;
}

nlohmann::json ClassMetrics::to_json() const {
  nlohmann::json j;
  j["pairs"] = pairs;
  j["accuracy"] = accuracy.to_json();
  j["classes"] = classes;
  j["confusion"] = confusion;
  j["per_class"] = nlohmann::json::array();
  for (const auto& c : per_class) {
    j["per_class"].push_back({{"class", c.name},
                              {"tp", c.tp},
                              {"fp", c.fp},
                              {"tn", c.tn},
                              {"fn", c.fn},
                              {"ppv", c.ppv.to_json()},
                              {"npv", c.npv.to_json()},
                              {"prevalence", c.prevalence.to_json()},
                              {"prevalence_normalized_ppv", nan_safe(c.prevalence_normalized_ppv)}});
  }
  return j;
}

ParentMap default_parent_map() {
  return {{"helper_t", "lymphocyte"},
          {"enterocyte", "epithelial"},
          {"progenitor", "epithelial"},
          {"fibroblast", "connective"},
          {"stromal_undetermined", "connective"}};
}

ParentMap read_parent_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in).get<ParentMap>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::format, path.string() + ": " + e.what());
  }
}

BoundedMetrics bounded_metrics(const MatchedPairSet& pairs, const ClassLabels& pred_subclasses,
                               const ClassLabels& truth_parents, const ParentMap& parents) {
  return bounded_metrics(label_pairs(pairs, pred_subclasses, truth_parents), parents);
}

BoundedMetrics bounded_metrics(const std::vector<LabelPair>& rows, const ParentMap& parents) {
  for (const auto& r : rows) {
    if (!parents.contains(r.pred)) {
      throw Error(ErrorKind::invalid_argument, "predicted subclass '" + r.pred + "' has no parent");
    }
  }
  BoundedMetrics out;
  for (const auto& [subclass, parent] : parents) {
    Bounded b;
    b.subclass = subclass;
    b.parent = parent;
    for (const auto& r : rows) {
      const bool same_parent = r.truth == parent;
      if (r.pred == subclass) {
        ++b.positives;
        b.parent_hits += same_parent ? 1 : 0;
      } else {
        ++b.negatives;
        (same_parent ? b.ambiguous_negatives : b.definite_negatives) += 1;
      }
    }
    b.ppv_upper = {b.parent_hits, b.positives};
    b.npv_lower = {b.definite_negatives, b.negatives};
    b.npv_upper = {b.definite_negatives + b.ambiguous_negatives, b.negatives};
    out.per_subclass.push_back(std::move(b));
  }
  return out;
}

nlohmann::json BoundedMetrics::to_json() const {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& b : per_subclass) {
    j.push_back({{"subclass", b.subclass},
                 {"parent", b.parent},
                 {"positives", b.positives},
                 {"negatives", b.negatives},
                 {"ambiguous_negatives", b.ambiguous_negatives},
                 {"ppv_upper", b.ppv_upper.to_json()},
                 {"npv_lower", b.npv_lower.to_json()},
                 {"npv_upper", b.npv_upper.to_json()}});
  }
  return j;
}

std::vector<double> midranks(const std::vector<double>& values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&values](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = mid;
    i = j + 1;
  }
  return ranks;
}

double regularized_gamma_q(double a, double x) {
  if (!(a > 0.0) || x < 0.0 || std::isnan(x)) {
    throw Error(ErrorKind::invalid_argument, "incomplete gamma needs a > 0 and x >= 0");
  }
  if (x == 0.0) return 1.0;
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-16;
  const double log_prefix = -x + a * std::log(x) - std::lgamma(a);
  if (x < a + 1.0) {
    // Series for P(a, x).
    double term = 1.0 / a;
    double sum = term;
    double ap = a;
    for (int n = 0; n < kMaxIter; ++n) {
      ap += 1.0;
      term *= x / ap;
      sum += term;
      if (std::fabs(term) < std::fabs(sum) * kEps) break;
    }
    return std::max(0.0, 1.0 - sum * std::exp(log_prefix));
  }
  // Continued fraction for Q(a, x), modified Lentz.
  constexpr double kTiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / kTiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < kMaxIter; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::fabs(delta - 1.0) < kEps) break;
  }
  return std::exp(log_prefix) * h;
}

double chi_square_survival(double statistic, double dof) {
  if (statistic <= 0.0) return 1.0;
  return regularized_gamma_q(dof / 2.0, statistic / 2.0);
}

nlohmann::json FriedmanResult::to_json() const {
  return {{"statistic", statistic},         {"degrees_of_freedom", degrees_of_freedom},
          {"p_value", p_value},             {"rank_sums", rank_sums},
          {"tie_correction", tie_correction}, {"small_sample", small_sample}};
}

FriedmanResult friedman_test(const std::vector<std::vector<double>>& values) {
  const std::size_t n = values.size();
  if (n < 2) throw Error(ErrorKind::invalid_argument, "Friedman test needs at least 2 blocks");
  const std::size_t k = values.front().size();
  if (k < 2) throw Error(ErrorKind::invalid_argument, "Friedman test needs at least 2 treatments");
  FriedmanResult r;
  r.rank_sums.assign(k, 0.0);
  double tie_sum = 0.0;
  for (const auto& block : values) {
    if (block.size() != k) throw Error(ErrorKind::invalid_argument, "missing cells: ragged blocks");
    for (double v : block) {
      if (std::isnan(v)) throw Error(ErrorKind::invalid_argument, "missing cells: NaN value");
    }
    const auto ranks = midranks(block);
    for (std::size_t j = 0; j < k; ++j) r.rank_sums[j] += ranks[j];
    auto sorted = block;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < k;) {
      std::size_t j = i;
      while (j + 1 < k && sorted[j + 1] == sorted[i]) ++j;
      const double t = static_cast<double>(j - i + 1);
      tie_sum += t * t * t - t;
      i = j + 1;
    }
  }
  const double nd = static_cast<double>(n);
  const double kd = static_cast<double>(k);
  double sum_sq = 0.0;
  for (double rs : r.rank_sums) sum_sq += rs * rs;
  const double raw = 12.0 / (nd * kd * (kd + 1.0)) * sum_sq - 3.0 * nd * (kd + 1.0);
  r.tie_correction = 1.0 - tie_sum / (nd * kd * (kd * kd - 1.0));
  r.degrees_of_freedom = static_cast<int>(k) - 1;
  r.small_sample = n < 10 || k < 4;
  if (r.tie_correction <= 1e-12) {
    r.statistic = 0.0;
    r.p_value = 1.0;
    return r;
  }
  r.statistic = std::max(0.0, raw / r.tie_correction);
  r.p_value = chi_square_survival(r.statistic, static_cast<double>(r.degrees_of_freedom));
  return r;
}

}  // namespace cytogate::metrics
