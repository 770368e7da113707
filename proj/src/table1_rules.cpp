#include "cytogate/cascade.hpp"

namespace cytogate::cascade {

// Mirror of rules/table1.rules; a unit test keeps the two identical.
std::string_view table1_program_text() {
  static constexpr std::string_view kText = R"RULES(# Label cascade for the 14 colon nucleus/cell classes.
# One step per line:  STEP <n> <VERB> [args] := <expr>
#   DEFINE_GROUP <Group>
#   EXCLUDE <all|Group> [KILL|DROP]
#   ANNOTATE <class> <all|Group>
# Stain atoms are Name+ / Name-; group atoms are Group, Group+ or Group-.
# DAPI is part of the annotation panel but no rule reads it.
STAINS NaKATPase PanCK Muc2 CgA Vimentin DAPI SMA Sox9 OLFM4 Lysozyme CD45 CD20 CD68 CD11B CD3d CD8 CD4

STEP 1 DEFINE_GROUP Epi := NaKATPase+ or PanCK+ or Muc2+ or CgA+
STEP 2 DEFINE_GROUP Stroma := Vimentin+ or SMA+
STEP 3 EXCLUDE all KILL := Epi+ and Stroma+
STEP 4 DEFINE_GROUP Immune := CD45+ or CD20+ or CD68+ or CD11B+ or Lysozyme+ or CD3d+ or CD8+ or CD4+
STEP 5 EXCLUDE all KILL := (CD68+ and CD3d+) or (CD68+ and CD20+) or (CD68+ and CD4+) or (CD68+ and CD8+) or (CD68+ and CD11B+)
STEP 6 EXCLUDE all KILL := (CD11B+ and CD3d+) or (CD11B+ and CD20+) or (CD11B+ and CD4+) or (CD11B+ and CD8+) or (CD11B+ and CD68+)
STEP 7 EXCLUDE all KILL := (CD20+ and CD3d+) or (CD20+ and CD4+) or (CD20+ and CD8+)
STEP 8 EXCLUDE all KILL := (CD3d- and CD45- and CD4+) or (CD3d- and CD45- and CD8+) or (CD4+ and CD8+)
STEP 9 DEFINE_GROUP Progenitor := Sox9+ or OLFM4+
# Scoped to progenitors: a global reading would remove every pure immune cell.
STEP 10 EXCLUDE Progenitor KILL := Epi- and Stroma-
STEP 11 EXCLUDE all KILL := (Muc2+ and Immune+) or (Muc2+ and Progenitor+) or (Muc2+ and SMA+)
STEP 12 EXCLUDE all KILL := (CgA+ and Immune+) or (CgA+ and SMA+) or (CgA+ and Progenitor+) or (CgA+ and Muc2+)
# The literal reading (SMA+ and Immune-) would remove every fibroblast candidate.
STEP 13 EXCLUDE all KILL := SMA+ and Immune+
STEP 14 EXCLUDE all KILL := Immune+ and Progenitor+
STEP 15 EXCLUDE all KILL := Epi- and Stroma- and Progenitor- and Immune-
STEP 16 EXCLUDE Epi DROP := Epi+ and Immune+
STEP 17 ANNOTATE goblet Epi := Muc2+ and Progenitor-
STEP 18 ANNOTATE enteroendocrine Epi := CgA+ and Progenitor-
STEP 19 ANNOTATE enterocyte Epi := CgA- and Progenitor- and Muc2-
STEP 20 DEFINE_GROUP FibroStromal := Stroma+ and Immune-
STEP 21 ANNOTATE fibroblast FibroStromal := SMA+ and Progenitor-
STEP 22 ANNOTATE stromal_undetermined FibroStromal := SMA- and Progenitor-
STEP 23 ANNOTATE myeloid Immune := (Lysozyme+ and CD68- and CD11B- and Progenitor- and CD20-) and CD3d- and CD8- and CD4-
STEP 24 ANNOTATE helper_t Immune := CD4+ and Progenitor-
STEP 25 ANNOTATE cytotoxic_t Immune := CD8+ and Progenitor-
STEP 26 ANNOTATE t_cell_receptor Immune := CD3d+ and CD4- and CD8-
STEP 27 ANNOTATE monocyte Immune := CD11B+ and CD3d- and Progenitor- and CD4- and CD8-
STEP 28 ANNOTATE macrophage Immune := CD68+ and CD3d- and Progenitor- and CD4- and CD8-
STEP 29 ANNOTATE b_cell Immune := CD20+ and CD68- and CD3d- and Progenitor- and CD4- and CD8-
STEP 30 ANNOTATE leukocyte Immune := CD45+ and CD20- and CD68- and CD3d- and Progenitor- and CD4- and CD8- and CD11B- and Lysozyme-
STEP 31 ANNOTATE progenitor all := Progenitor+
)RULES";
  return kText;
}

const RuleProgram& table1_program() {
  static const RuleProgram program = parse_rule_program(table1_program_text());
  return program;
}

}  // namespace cytogate::cascade
