#include "cytogate/cv_split.hpp"

#include <algorithm>
#include <map>
#include <random>
#include <set>
#include <span>

#include "cytogate/csv.hpp"
#include "cytogate/error.hpp"

namespace cytogate::cv {

std::vector<std::string> CohortTable::patients() const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& s : slides) {
    if (seen.insert(s.patient_id).second) out.push_back(s.patient_id);
  }
  return out;
}

void CohortTable::validate() const {
  std::set<std::string> ids;
  for (const auto& s : slides) {
    if (!ids.insert(s.slide_id).second) {
      throw Error(ErrorKind::invalid_argument, "duplicate slide id '" + s.slide_id + "'");
    }
    if (s.patient_id.empty()) throw Error(ErrorKind::invalid_argument, "slide without patient");
  }
}

CohortTable CohortTable::read_csv(const std::filesystem::path& path) {
  const auto t = csv::read(path);
  const auto cs = t.column("slide_id"), cp = t.column("patient_id"), csite = t.column("site"),
             cd = t.column("disease");
  CohortTable cohort;
  for (const auto& f : t.rows) {
    cohort.slides.push_back({f[cs], f[cp], parse_site(f[csite]), parse_disease(f[cd])});
  }
  cohort.validate();
  return cohort;
}

void CohortTable::write_csv(const std::filesystem::path& path) const {
  csv::Table t;
  t.header = {"slide_id", "patient_id", "site", "disease"};
  for (const auto& s : slides) {
    t.rows.push_back({s.slide_id, s.patient_id, std::string(to_string(s.site)),
                      std::string(to_string(s.disease))});
  }
  csv::write(path, t);
}

nlohmann::json FoldPlan::to_json() const {
  nlohmann::json j;
  j["folds"] = nlohmann::json::array();
  for (const auto& f : folds) {
    j["folds"].push_back({{"train", f.train}, {"val", f.val}, {"test", f.test}});
  }
  return j;
}

FoldPlan FoldPlan::from_json(const nlohmann::json& j) {
  FoldPlan plan;
  try {
    for (const auto& f : j.at("folds")) {
      plan.folds.push_back({f.at("train").get<std::vector<std::string>>(),
                            f.at("val").get<std::vector<std::string>>(),
                            f.at("test").get<std::vector<std::string>>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::format, std::string("fold plan: ") + e.what());
  }
  return plan;
}

namespace {

struct Coverage {
  bool ascending = false;
  bool ileum = false;
  bool normal = false;
  bool diseased = false;

  bool complete() const { return ascending && ileum && normal && diseased; }
  std::string first_gap() const {
    if (!ascending) return "site=ascending_colon";
    if (!ileum) return "site=terminal_ileum";
    if (!normal) return "disease=normal";
    if (!diseased) return "disease=diseased";
    return {};
  }
  void add(const Coverage& o) {
    ascending |= o.ascending;
    ileum |= o.ileum;
    normal |= o.normal;
    diseased |= o.diseased;
  }
};

using CoverageMap = std::map<std::string, Coverage>;

CoverageMap patient_coverage(const CohortTable& cohort) {
  CoverageMap m;
  for (const auto& s : cohort.slides) {
    auto& c = m[s.patient_id];
    c.ascending |= s.site == Site::ascending_colon;
    c.ileum |= s.site == Site::terminal_ileum;
    c.normal |= s.disease == Disease::normal;
    c.diseased |= s.disease == Disease::diseased;
  }
  return m;
}

Coverage subset_coverage(const CoverageMap& m, std::span<const std::string> patients) {
  Coverage c;
  for (const auto& p : patients) c.add(m.at(p));
  return c;
}

}  // namespace

bool covers_site_and_disease(const CohortTable& cohort, const std::vector<std::string>& patients) {
  return subset_coverage(patient_coverage(cohort), patients).complete();
}

FoldPlan make_folds(const CohortTable& cohort, std::uint64_t seed, const SplitOptions& options) {
  cohort.validate();
  const auto coverage = patient_coverage(cohort);
  auto patients = cohort.patients();
  std::sort(patients.begin(), patients.end());
  const std::size_t n = patients.size();
  if (options.folds < 2 || n == 0 || n % options.folds != 0 || n < 3 * (n / options.folds)) {
    throw Error(ErrorKind::infeasible, std::to_string(n) + " patients cannot be divided into " +
                                           std::to_string(options.folds) +
                                           " equal test sets with an equal validation set");
  }
  const std::size_t test_size = n / options.folds;
  const std::size_t val_size = test_size;

  const auto whole = subset_coverage(coverage, patients);
  if (!whole.complete()) {
    throw Error(ErrorKind::infeasible,
                "constraint " + whole.first_gap() + " cannot hold: the cohort has no such slide");
  }

  std::mt19937_64 rng(seed);
  std::map<std::string, std::size_t> failures;
  std::size_t attempts = 0;
  auto check = [&](const std::vector<std::string>& subset, const char* which) {
    const auto c = subset_coverage(coverage, subset);
    if (!c.complete()) ++failures[std::string(which) + " " + c.first_gap()];
    return c.complete();
  };
  // Each shuffle consumes one attempt from the shared budget. The test
  // partition is drawn first; each fold's val/train split is then redrawn
  // until it covers both sites and states.
  while (attempts < options.max_attempts) {
    ++attempts;
    std::shuffle(patients.begin(), patients.end(), rng);
    bool tests_ok = true;
    for (std::size_t f = 0; f < options.folds && tests_ok; ++f) {
      const auto first = patients.begin() + static_cast<std::ptrdiff_t>(f * test_size);
      tests_ok = check({first, first + static_cast<std::ptrdiff_t>(test_size)}, "test");
    }
    if (!tests_ok) continue;

    FoldPlan plan;
    bool complete = true;
    for (std::size_t f = 0; f < options.folds && complete; ++f) {
      Fold fold;
      const auto test_begin = patients.begin() + static_cast<std::ptrdiff_t>(f * test_size);
      const auto test_end = test_begin + static_cast<std::ptrdiff_t>(test_size);
      fold.test.assign(test_begin, test_end);
      std::vector<std::string> rest(patients.begin(), test_begin);
      rest.insert(rest.end(), test_end, patients.end());
      bool split_ok = false;
      while (!split_ok && attempts < options.max_attempts) {
        ++attempts;
        std::shuffle(rest.begin(), rest.end(), rng);
        fold.val.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(val_size));
        fold.train.assign(rest.begin() + static_cast<std::ptrdiff_t>(val_size), rest.end());
        split_ok = check(fold.val, "val") && check(fold.train, "train");
      }
      complete = split_ok;
      plan.folds.push_back(std::move(fold));
    }
    if (complete) {
      for (auto& fold : plan.folds) {
        std::sort(fold.train.begin(), fold.train.end());
        std::sort(fold.val.begin(), fold.val.end());
        std::sort(fold.test.begin(), fold.test.end());
      }
      plan.attempts = attempts;
      return plan;
    }
  }
  std::string worst = "coverage";
  std::size_t worst_count = 0;
  for (const auto& [what, count] : failures) {
    if (count > worst_count) {
      worst = what;
      worst_count = count;
    }
  }
  throw Error(ErrorKind::infeasible, "no valid plan in " + std::to_string(options.max_attempts) +
                                         " attempts; most often violated: " + worst);
}

}  // namespace cytogate::cv
