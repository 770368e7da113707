#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "cytogate/cascade.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace cytogate;
using namespace cytogate::cascade;
using testing_support::error_kind;
using testing_support::source_dir;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

PositivityMatrix matrix_from_masks(const RuleProgram& program, const std::vector<StainMask>& masks) {
  std::vector<std::uint32_t> ids;
  for (std::size_t i = 0; i < masks.size(); ++i) ids.push_back(static_cast<std::uint32_t>(10 * i + 1));
  PositivityMatrix pm(ids, program.stains());
  for (std::size_t r = 0; r < masks.size(); ++r) {
    for (std::size_t c = 0; c < program.stains().size(); ++c) pm.set(r, c, (masks[r] >> c) & 1u);
  }
  return pm;
}

}  // namespace

TEST(RuleProgram, EmbeddedTextMatchesShippedFile) {
  EXPECT_EQ(std::string(table1_program_text()), slurp(source_dir() / "rules/table1.rules"));
}

TEST(RuleProgram, ShippedProgramShape) {
  const auto& p = table1_program();
  ASSERT_EQ(p.steps().size(), 31u);
  EXPECT_EQ(p.stains(), oracle::panel());
  const std::pair<int, const char*> defs[] = {{1, "Epi"}, {2, "Stroma"}, {4, "Immune"}, {9, "Progenitor"}};
  for (const auto& [number, name] : defs) {
    const auto& step = p.steps()[static_cast<std::size_t>(number - 1)];
    EXPECT_EQ(step.number, number);
    ASSERT_EQ(step.verb, Verb::define_group);
    EXPECT_EQ(p.groups()[static_cast<std::size_t>(step.group)], name);
  }
  // DAPI is declared but never read.
  EXPECT_FALSE(p.references_stain(p.stain_index("DAPI")));
}

TEST(RuleProgram, UnknownClassIsRejected) {
  EXPECT_EQ(error_kind([] { parse_rule_program("STAINS A\nSTEP 1 ANNOTATE wizard all := A+\n"); }),
            ErrorKind::unknown_class);
}

TEST(RuleProgram, UndefinedGroupIsRejected) {
  EXPECT_EQ(error_kind([] { parse_rule_program("STEP 1 EXCLUDE all := Ghost\n"); }),
            ErrorKind::undefined_group);
  EXPECT_EQ(error_kind([] { parse_rule_program("STEP 1 ANNOTATE goblet Ghost := A+\n"); }),
            ErrorKind::undefined_group);
}

TEST(RuleProgram, SyntaxErrorsCarryLineNumbers) {
  try {
    parse_rule_program("# comment\nSTAINS A B\n\nSTEP 1 DEFINE_GROUP G := A+ and\n");
    FAIL() << "expected a syntax error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::syntax);
    EXPECT_NE(std::string(e.what()).find("line 4"), std::string::npos) << e.what();
  }
  EXPECT_EQ(error_kind([] { parse_rule_program("STEP 1 DEFINE_GROUP G = A+\n"); }), ErrorKind::syntax);
  EXPECT_EQ(error_kind([] { parse_rule_program("STEP 1 DEFINE_GROUP G := (A+ or B+\n"); }),
            ErrorKind::syntax);
}

TEST(RuleProgram, EmptyProgramLabelsEverythingUnlabeled) {
  const auto p = parse_rule_program("");
  EXPECT_TRUE(p.steps().empty());
  const auto e = evaluate(p, 0);
  EXPECT_EQ(e.outcome, CellClass::unlabeled);
  EXPECT_EQ(e.step, 0);
}

TEST(RuleProgram, TextRoundTripPreservesBehavior) {
  const auto& p = table1_program();
  const auto q = parse_rule_program(p.to_text());
  ASSERT_EQ(q.steps().size(), p.steps().size());
  EXPECT_EQ(q.stains(), p.stains());
  std::mt19937_64 rng(5);
  for (int i = 0; i < 4000; ++i) {
    const StainMask m = rng() & ((StainMask{1} << 17) - 1);
    ASSERT_EQ(evaluate(q, m), evaluate(p, m)) << describe_vector(p, m);
  }
}

TEST(Evaluate, HandTraceTables) {
  const auto rows = oracle::read_trace_tables((source_dir() / "docs/cascade_traces.md").string());
  ASSERT_EQ(rows.size(), 25u);
  for (const auto& row : rows) {
    const auto m = oracle::mask_of(row.positive);
    const auto e = evaluate(table1_program(), m);
    EXPECT_EQ(to_string(e.outcome), row.outcome) << describe_vector(table1_program(), m);
    EXPECT_EQ(e.step, row.step) << describe_vector(table1_program(), m);
  }
}

TEST(Evaluate, SpecificTraces) {
  const auto& p = table1_program();
  const auto eval = [&](std::vector<std::string> names) { return evaluate(p, oracle::mask_of(names)); };
  EXPECT_EQ(eval({}), (Evaluation{CellClass::excluded, 15, 0}));
  EXPECT_EQ(eval({"Muc2"}), (Evaluation{CellClass::goblet, 17, 0}));
  EXPECT_EQ(eval({"CD45", "CD4"}), (Evaluation{CellClass::helper_t, 24, 0}));
  EXPECT_EQ(eval({"Sox9", "NaKATPase"}), (Evaluation{CellClass::progenitor, 31, 0}));
}

struct VariantCase {
  const char* name;
  const char* file;
  oracle::CascadeVariant variant;
};

void PrintTo(const VariantCase& c, std::ostream* os) { *os << c.file; }

class OracleEquivalence : public ::testing::TestWithParam<VariantCase> {};

TEST_P(OracleEquivalence, AllVectorsAgree) {
  const auto& c = GetParam();
  const auto program = load_rule_program(source_dir() / "rules" / c.file);
  ASSERT_EQ(program.stains(), oracle::panel());
  std::size_t mismatches = 0;
  for (StainMask m = 0; m < (StainMask{1} << 17); ++m) {
    const auto expected = oracle::table1(oracle::from_mask(m), c.variant);
    const auto got = evaluate(program, m);
    if (got != expected && ++mismatches <= 5) {
      ADD_FAILURE() << describe_vector(program, m) << ": got " << to_string(got.outcome) << "@"
                    << got.step << ", oracle " << to_string(expected.outcome) << "@" << expected.step;
    }
  }
  EXPECT_EQ(mismatches, 0u);
}

INSTANTIATE_TEST_SUITE_P(Variants, OracleEquivalence,
                         ::testing::Values(VariantCase{"Shipped", "table1.rules", {false, false}},
                                           VariantCase{"GlobalStep10", "table1_step10_global.rules", {true, false}},
                                           VariantCase{"LiteralStep13", "table1_step13_literal.rules", {false, true}}),
                         [](const auto& info) { return std::string(info.param.name); });

TEST(Enumerate, ShippedProgramHasOneOutcomePerVector) {
  const auto table = enumerate_outcomes(table1_program());
  EXPECT_EQ(table.rows.size(), std::size_t{1} << 17);
  EXPECT_TRUE(table.violations.empty());
  std::size_t total = 0;
  for (auto n : table.counts) total += n;
  EXPECT_EQ(total, table.rows.size());
  for (std::size_t i = 0; i < kCellClassCount; ++i) EXPECT_GT(table.counts[i], 0u) << kOutcomeNames[i];
}

TEST(Enumerate, OverlappingAnnotationsAreViolations) {
  const auto p = parse_rule_program(
      "STAINS A B\n"
      "STEP 1 ANNOTATE goblet all := A+ or A-\n"
      "STEP 2 ANNOTATE enterocyte all := B+ or B-\n");
  const auto table = enumerate_outcomes(p);
  ASSERT_EQ(table.violations.size(), 4u);
  EXPECT_EQ(table.violations[0].first_step, 1);
  EXPECT_EQ(table.violations[0].second_step, 2);

  try {
    run_cascade(p, matrix_from_masks(p, {0b01}));
    FAIL() << "expected an exclusivity violation";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::exclusivity_violation);
    const std::string what = e.what();
    EXPECT_NE(what.find('1'), std::string::npos);
    EXPECT_NE(what.find('2'), std::string::npos);
  }
}

TEST(Enumerate, RefusesLargePanels) {
  std::string text = "STAINS";
  for (int i = 0; i < 21; ++i) text += " S" + std::to_string(i);
  EXPECT_EQ(error_kind([&] { enumerate_outcomes(parse_rule_program(text + "\n")); }),
            ErrorKind::too_many_stains);
}

TEST(RunCascade, RowsAreIndependent) {
  const auto& p = table1_program();
  std::mt19937_64 rng(9);
  std::vector<StainMask> masks;
  for (int i = 0; i < 300; ++i) {
    // Sparse vectors reach the annotation steps more often than uniform ones.
    StainMask m = 0;
    for (int b = 0; b < 17; ++b) m |= StainMask{(rng() % 6) == 0} << b;
    masks.push_back(m);
  }
  const auto all = run_cascade(p, matrix_from_masks(p, masks));
  ASSERT_EQ(all.size(), masks.size());
  for (std::size_t i = 0; i < masks.size(); ++i) {
    const auto one = run_cascade(p, matrix_from_masks(p, {masks[i]}));
    EXPECT_EQ(one.outcomes[0], all.outcomes[i]);
    EXPECT_EQ(one.steps[0], all.steps[i]);
    EXPECT_EQ(all.outcomes[i], evaluate(p, masks[i]).outcome);
  }
}

TEST(RunCascade, MissingStainColumn) {
  PositivityMatrix pm({1}, {"NaKATPase", "PanCK"});
  EXPECT_EQ(error_kind([&] { run_cascade(table1_program(), pm); }), ErrorKind::missing_stain);
}

TEST(RunCascade, ExtraColumnsAndOrderDoNotMatter) {
  const auto& p = table1_program();
  std::vector<std::string> stains(p.stains().rbegin(), p.stains().rend());
  stains.push_back("Unused");
  PositivityMatrix pm({7}, stains);
  pm.set(0, pm.stain_index("Muc2"), true);
  pm.set(0, pm.stain_index("Unused"), true);
  const auto out = run_cascade(p, pm);
  EXPECT_EQ(out.outcomes[0], CellClass::goblet);
  EXPECT_EQ(out.steps[0], 17);
}

TEST(LabelAssignment, CsvRoundTrip) {
  testing_support::TempDir dir;
  const auto& p = table1_program();
  const auto labels = run_cascade(p, matrix_from_masks(p, {oracle::mask_of({"Muc2"}), 0, oracle::mask_of({"CD45"})}));
  labels.write_csv(dir / "labels.csv");
  const auto back = LabelAssignment::read_csv(dir / "labels.csv");
  EXPECT_EQ(back.ids, labels.ids);
  EXPECT_EQ(back.outcomes, labels.outcomes);
  EXPECT_EQ(back.steps, labels.steps);
}
