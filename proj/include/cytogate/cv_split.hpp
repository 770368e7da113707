#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cytogate/slide_io.hpp"

namespace cytogate::cv {

struct CohortSlide {
  std::string slide_id;
  std::string patient_id;
  Site site = Site::other;
  Disease disease = Disease::normal;
};

struct CohortTable {
  std::vector<CohortSlide> slides;

  /// Unique patient ids in first-appearance order.
  std::vector<std::string> patients() const;
  void validate() const;

  static CohortTable read_csv(const std::filesystem::path& path);
  void write_csv(const std::filesystem::path& path) const;
};

struct Fold {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
};

struct FoldPlan {
  std::vector<Fold> folds;
  std::size_t attempts = 0;  // candidate plans drawn before success

  nlohmann::json to_json() const;
  static FoldPlan from_json(const nlohmann::json& j);
};

struct SplitOptions {
  std::size_t folds = 5;
  std::size_t max_attempts = 10000;
};

/// True when the patients' slides cover both sites and both disease states.
bool covers_site_and_disease(const CohortTable& cohort, const std::vector<std::string>& patients);

/// Patient-level folds: test sets partition the patients, val has the same
/// size as test, the rest train. Every subset must cover both sites and
/// both disease states. Seeded rejection sampling within max_attempts;
/// throws Error(infeasible) naming the constraint that failed.
FoldPlan make_folds(const CohortTable& cohort, std::uint64_t seed, const SplitOptions& options = {});

}  // namespace cytogate::cv
