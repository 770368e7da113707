#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "cytogate/cell_class.hpp"
#include "cytogate/instance_stats.hpp"

namespace cytogate::cascade {

/// Bit i is set when stain i of the program panel is positive.
using StainMask = std::uint64_t;

inline constexpr std::size_t kMaxPanelStains = 64;
inline constexpr std::size_t kMaxGroups = 32;
inline constexpr std::size_t kMaxEnumeratedStains = 20;

enum class Verb { define_group, exclude, annotate };
enum class ExcludeMode { kill, drop };

/// Boolean expression node; children are indices into RuleProgram::nodes().
struct Node {
  enum class Op : std::uint8_t { stain, group, negate, both, either, constant };
  Op op = Op::constant;
  bool positive = true;  // sign of stain/group atoms; value of constants
  std::uint16_t index = 0;
  std::int32_t lhs = -1;
  std::int32_t rhs = -1;
};

struct Step {
  int number = 0;
  int line = 0;
  Verb verb = Verb::define_group;
  int group = -1;  // DEFINE_GROUP target
  int scope = -1;  // EXCLUDE/ANNOTATE scope group, -1 = all instances
  ExcludeMode mode = ExcludeMode::kill;
  CellClass annotation = CellClass::unlabeled;
  std::int32_t predicate = -1;
};

class RuleProgram {
 public:
  const std::vector<Step>& steps() const noexcept { return steps_; }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  /// Declared panel (STAINS line) followed by any further referenced stains.
  const std::vector<std::string>& stains() const noexcept { return stains_; }
  const std::vector<std::string>& groups() const noexcept { return groups_; }
  /// Whether any predicate reads stain `i`.
  bool references_stain(std::size_t i) const noexcept { return referenced_[i]; }
  std::size_t stain_index(std::string_view name) const noexcept;

  /// Canonical text form; parses back to an equivalent program.
  std::string to_text() const;
  std::string expression_text(std::int32_t node) const;

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

 private:
  friend RuleProgram parse_rule_program(std::string_view text);
  friend class ProgramBuilder;

  std::vector<Step> steps_;
  std::vector<Node> nodes_;
  std::vector<std::string> stains_;
  std::vector<bool> referenced_;
  std::vector<std::string> groups_;
  std::size_t declared_stains_ = 0;
};

/// Throws Error(syntax) with a line number, Error(undefined_group) or
/// Error(unknown_class).
RuleProgram parse_rule_program(std::string_view text);
RuleProgram load_rule_program(const std::filesystem::path& path);

/// The default cascade, embedded from rules/table1.rules.
std::string_view table1_program_text();
const RuleProgram& table1_program();

/// Outcome of one positivity vector.
struct Evaluation {
  CellClass outcome = CellClass::unlabeled;
  int step = 0;           // step number that excluded or annotated; 0 if unlabeled
  int conflict_step = 0;  // a second ANNOTATE step that also fired; 0 if none

  bool violated() const noexcept { return conflict_step != 0; }
  friend bool operator==(const Evaluation&, const Evaluation&) = default;
};

/// Runs the program over one vector. Once an ANNOTATE fires the instance is
/// settled: later DEFINE/EXCLUDE steps skip it, later ANNOTATE predicates are
/// still checked so that a second firing is reported as a conflict.
Evaluation evaluate(const RuleProgram& program, StainMask positive);

struct LabelAssignment {
  std::vector<std::uint32_t> ids;
  std::vector<CellClass> outcomes;
  std::vector<int> steps;

  std::size_t size() const noexcept { return ids.size(); }
  std::array<std::size_t, kOutcomeCount> counts() const;

  void write_csv(const std::filesystem::path& path) const;
  static LabelAssignment read_csv(const std::filesystem::path& path);
};

/// Rows are independent. Throws Error(missing_stain) when a stain a
/// predicate reads has no column, and Error(exclusivity_violation) naming the
/// instance, its positive stains and both step numbers.
LabelAssignment run_cascade(const RuleProgram& program, const PositivityMatrix& positivity);

struct Violation {
  StainMask vector = 0;
  int first_step = 0;
  int second_step = 0;
};

struct OutcomeTable {
  std::vector<std::string> stains;  // bit order of the row index
  std::vector<Evaluation> rows;     // index = StainMask
  std::array<std::size_t, kOutcomeCount> counts{};
  std::vector<Violation> violations;

  void write_csv(const std::filesystem::path& path) const;
};

/// Evaluates all 2^n vectors over the program panel. Throws
/// Error(too_many_stains) above kMaxEnumeratedStains.
OutcomeTable enumerate_outcomes(const RuleProgram& program);

std::string describe_vector(const RuleProgram& program, StainMask positive);

}  // namespace cytogate::cascade
