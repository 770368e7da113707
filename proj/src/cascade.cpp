#include "cytogate/cascade.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <optional>
#include <sstream>

#include "cytogate/csv.hpp"
#include "cytogate/error.hpp"

namespace cytogate::cascade {

std::size_t RuleProgram::stain_index(std::string_view name) const noexcept {
  for (std::size_t i = 0; i < stains_.size(); ++i) {
    if (stains_[i] == name) return i;
  }
  return npos;
}

namespace {

struct Token {
  enum class Kind { ident, plus, minus, lparen, rparen, assign, end };
  Kind kind = Kind::end;
  std::string text;
  bool glued = false;  // no whitespace before this token
};

bool is_ident_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '_';
}

bool iequals(std::string_view a, std::string_view b) {
  return a.size() == b.size() &&
         std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
           return std::tolower(static_cast<unsigned char>(x)) ==
                  std::tolower(static_cast<unsigned char>(y));
         });
}

}  // namespace

/// Line-oriented parser that assembles a RuleProgram in place.
class ProgramBuilder {
 public:
  explicit ProgramBuilder(std::string_view text) : text_(text) {}

  RuleProgram build() {
    collect_group_names();
    std::size_t pos = 0;
    line_ = 0;
    while (pos <= text_.size()) {
      auto end = text_.find('\n', pos);
      if (end == std::string_view::npos) end = text_.size();
      ++line_;
      parse_line(text_.substr(pos, end - pos));
      pos = end + 1;
    }
    return std::move(program_);
  }

 private:
  [[noreturn]] void syntax(const std::string& what) const {
    throw Error(ErrorKind::syntax, "line " + std::to_string(line_) + ": " + what);
  }

  static std::string_view strip_comment(std::string_view line) {
    const auto hash = line.find('#');
    if (hash != std::string_view::npos) line = line.substr(0, hash);
    return line;
  }

  void tokenize(std::string_view line) {
    tokens_.clear();
    cursor_ = 0;
    std::size_t i = 0;
    bool glued = false;
    while (i < line.size()) {
      const char c = line[i];
      if (std::isspace(static_cast<unsigned char>(c))) {
        ++i;
        glued = false;
        continue;
      }
      Token t;
      t.glued = glued;
      if (is_ident_char(c)) {
        const auto start = i;
        while (i < line.size() && is_ident_char(line[i])) ++i;
        t.kind = Token::Kind::ident;
        t.text = std::string(line.substr(start, i - start));
      } else if (c == '+') {
        t.kind = Token::Kind::plus;
        ++i;
      } else if (c == '-') {
        t.kind = Token::Kind::minus;
        ++i;
      } else if (c == '(') {
        t.kind = Token::Kind::lparen;
        ++i;
      } else if (c == ')') {
        t.kind = Token::Kind::rparen;
        ++i;
      } else if (c == ':' && i + 1 < line.size() && line[i + 1] == '=') {
        t.kind = Token::Kind::assign;
        i += 2;
      } else {
        syntax(std::string("unexpected character '") + c + "'");
      }
      tokens_.push_back(std::move(t));
      glued = true;
    }
    tokens_.push_back(Token{});
  }

  const Token& peek() const { return tokens_[cursor_]; }
  Token take() { return tokens_[cursor_ == tokens_.size() - 1 ? cursor_ : cursor_++]; }

  std::string expect_ident(const char* what) {
    if (peek().kind != Token::Kind::ident) syntax(std::string("expected ") + what);
    return take().text;
  }

  void collect_group_names() {
    std::istringstream in{std::string(text_)};
    std::string raw;
    while (std::getline(in, raw)) {
      std::istringstream words{std::string(strip_comment(raw))};
      std::string w0, w1, w2, w3;
      words >> w0 >> w1 >> w2 >> w3;
      if (iequals(w0, "STEP") && iequals(w2, "DEFINE_GROUP") && !w3.empty()) {
        all_groups_.push_back(w3);
      }
    }
  }

  bool is_known_group_anywhere(std::string_view name) const {
    return std::find(all_groups_.begin(), all_groups_.end(), name) != all_groups_.end();
  }

  int group_index(std::string_view name) const {
    const auto& g = program_.groups_;
    const auto it = std::find(g.begin(), g.end(), name);
    return it == g.end() ? -1 : static_cast<int>(it - g.begin());
  }

  std::size_t stain_slot(const std::string& name) {
    auto idx = program_.stain_index(name);
    if (idx == RuleProgram::npos) {
      if (program_.stains_.size() >= kMaxPanelStains) syntax("too many stains");
      program_.stains_.push_back(name);
      program_.referenced_.push_back(false);
      idx = program_.stains_.size() - 1;
    }
    return idx;
  }

  std::int32_t add_node(Node n) {
    program_.nodes_.push_back(n);
    return static_cast<std::int32_t>(program_.nodes_.size() - 1);
  }

  int resolve_scope(const std::string& word) {
    if (iequals(word, "all")) return -1;
    const int g = group_index(word);
    if (g < 0) {
      throw Error(ErrorKind::undefined_group,
                  "line " + std::to_string(line_) + ": scope '" + word + "' is not a defined group");
    }
    return g;
  }

  std::int32_t parse_or() {
    auto lhs = parse_and();
    while (peek().kind == Token::Kind::ident && iequals(peek().text, "or")) {
      take();
      auto rhs = parse_and();
      lhs = add_node({Node::Op::either, true, 0, lhs, rhs});
    }
    return lhs;
  }

  std::int32_t parse_and() {
    auto lhs = parse_unary();
    while (peek().kind == Token::Kind::ident && iequals(peek().text, "and")) {
      take();
      auto rhs = parse_unary();
      lhs = add_node({Node::Op::both, true, 0, lhs, rhs});
    }
    return lhs;
  }

  std::int32_t parse_unary() {
    const Token& t = peek();
    if (t.kind == Token::Kind::lparen) {
      take();
      auto inner = parse_or();
      if (peek().kind != Token::Kind::rparen) syntax("expected ')'");
      take();
      return inner;
    }
    if (t.kind != Token::Kind::ident) syntax("expected a stain or group atom");
    if (iequals(t.text, "not")) {
      take();
      auto inner = parse_unary();
      return add_node({Node::Op::negate, true, 0, inner, -1});
    }
    if (iequals(t.text, "true") || iequals(t.text, "false")) {
      const bool value = iequals(take().text, "true");
      return add_node({Node::Op::constant, value, 0, -1, -1});
    }
    if (iequals(t.text, "and") || iequals(t.text, "or")) syntax("operator without operand");
    const std::string name = take().text;
    std::optional<bool> sign;
    if ((peek().kind == Token::Kind::plus || peek().kind == Token::Kind::minus) && peek().glued) {
      sign = take().kind == Token::Kind::plus;
    }
    const int g = group_index(name);
    if (g >= 0) {
      return add_node({Node::Op::group, sign.value_or(true), static_cast<std::uint16_t>(g), -1, -1});
    }
    if (is_known_group_anywhere(name)) {
      throw Error(ErrorKind::undefined_group, "line " + std::to_string(line_) + ": group '" + name +
                                                  "' is referenced before its definition");
    }
    if (!sign) {
      throw Error(ErrorKind::undefined_group, "line " + std::to_string(line_) + ": '" + name +
                                                  "' is not a defined group (stains need + or -)");
    }
    const auto s = stain_slot(name);
    program_.referenced_[s] = true;
    return add_node({Node::Op::stain, *sign, static_cast<std::uint16_t>(s), -1, -1});
  }

  std::int32_t parse_predicate() {
    if (peek().kind != Token::Kind::assign) syntax("expected ':='");
    take();
    if (peek().kind == Token::Kind::end) syntax("empty predicate");
    auto root = parse_or();
    if (peek().kind != Token::Kind::end) syntax("unexpected trailing tokens");
    return root;
  }

  void parse_line(std::string_view raw) {
    tokenize(strip_comment(raw));
    if (peek().kind == Token::Kind::end) return;
    const std::string head = expect_ident("STEP or STAINS");
    if (iequals(head, "STAINS")) {
      if (!program_.steps_.empty() || seen_stains_) syntax("STAINS must precede all steps, once");
      seen_stains_ = true;
      while (peek().kind == Token::Kind::ident) {
        const auto name = take().text;
        if (program_.stain_index(name) != RuleProgram::npos) syntax("duplicate stain '" + name + "'");
        stain_slot(name);
      }
      if (peek().kind != Token::Kind::end) syntax("unexpected token in STAINS line");
      program_.declared_stains_ = program_.stains_.size();
      return;
    }
    if (!iequals(head, "STEP")) syntax("expected STEP, got '" + head + "'");
    Step step;
    step.line = line_;
    const auto number = expect_ident("step number");
    try {
      std::size_t used = 0;
      step.number = std::stoi(number, &used);
      if (used != number.size()) throw std::invalid_argument("");
    } catch (const std::exception&) {
      syntax("bad step number '" + number + "'");
    }
    if (step.number <= 0 || (!program_.steps_.empty() && step.number <= program_.steps_.back().number)) {
      syntax("step numbers must be positive and increasing");
    }
    const auto verb = expect_ident("verb");
    if (iequals(verb, "DEFINE_GROUP")) {
      step.verb = Verb::define_group;
      const auto name = expect_ident("group name");
      if (group_index(name) >= 0) syntax("group '" + name + "' defined twice");
      if (program_.stain_index(name) != RuleProgram::npos) {
        syntax("'" + name + "' is already a stain name");
      }
      if (program_.groups_.size() >= kMaxGroups) syntax("too many groups");
      step.predicate = parse_predicate();
      program_.groups_.push_back(name);
      step.group = static_cast<int>(program_.groups_.size() - 1);
    } else if (iequals(verb, "EXCLUDE")) {
      step.verb = Verb::exclude;
      step.scope = resolve_scope(expect_ident("scope"));
      if (peek().kind == Token::Kind::ident) {
        const auto mode = take().text;
        if (iequals(mode, "KILL")) {
          step.mode = ExcludeMode::kill;
        } else if (iequals(mode, "DROP")) {
          step.mode = ExcludeMode::drop;
        } else {
          syntax("exclude mode must be KILL or DROP");
        }
      }
      if (step.mode == ExcludeMode::drop && step.scope < 0) {
        syntax("DROP needs a group scope");
      }
      step.predicate = parse_predicate();
    } else if (iequals(verb, "ANNOTATE")) {
      step.verb = Verb::annotate;
      const auto cls_name = expect_ident("class name");
      const auto cls = parse_cell_class(cls_name);
      if (!cls) {
        throw Error(ErrorKind::unknown_class,
                    "line " + std::to_string(line_) + ": unknown class '" + cls_name + "'");
      }
      step.annotation = *cls;
      step.scope = resolve_scope(expect_ident("scope"));
      step.predicate = parse_predicate();
    } else {
      syntax("unknown verb '" + verb + "'");
    }
    program_.steps_.push_back(step);
  }

  std::string_view text_;
  RuleProgram program_;
  std::vector<std::string> all_groups_;
  std::vector<Token> tokens_;
  std::size_t cursor_ = 0;
  int line_ = 0;
  bool seen_stains_ = false;
};

RuleProgram parse_rule_program(std::string_view text) { return ProgramBuilder(text).build(); }

RuleProgram load_rule_program(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_rule_program(ss.str());
}

std::string RuleProgram::expression_text(std::int32_t node) const {
  const Node& n = nodes_[static_cast<std::size_t>(node)];
  auto child = [this](std::int32_t c, Node::Op parent) {
    const auto op = nodes_[static_cast<std::size_t>(c)].op;
    const bool wrap = (parent == Node::Op::negate && (op == Node::Op::both || op == Node::Op::either)) ||
                      (parent == Node::Op::both && op == Node::Op::either);
    auto s = expression_text(c);
    return wrap ? "(" + s + ")" : s;
  };
  switch (n.op) {
    case Node::Op::stain: return stains_[n.index] + (n.positive ? "+" : "-");
    case Node::Op::group: return groups_[n.index] + (n.positive ? "+" : "-");
    case Node::Op::constant: return n.positive ? "true" : "false";
    case Node::Op::negate: return "not " + child(n.lhs, n.op);
    case Node::Op::both: return child(n.lhs, n.op) + " and " + child(n.rhs, n.op);
    case Node::Op::either: return child(n.lhs, n.op) + " or " + child(n.rhs, n.op);
  }
  return {};
}

std::string RuleProgram::to_text() const {
  std::string out;
  if (declared_stains_ > 0) {
    out += "STAINS";
    for (std::size_t i = 0; i < declared_stains_; ++i) out += " " + stains_[i];
    out += '\n';
  }
  for (const auto& s : steps_) {
    out += "STEP " + std::to_string(s.number) + " ";
    const std::string scope = s.scope < 0 ? "all" : groups_[static_cast<std::size_t>(s.scope)];
    switch (s.verb) {
      case Verb::define_group:
        out += "DEFINE_GROUP " + groups_[static_cast<std::size_t>(s.group)];
        break;
      case Verb::exclude:
        out += "EXCLUDE " + scope + (s.mode == ExcludeMode::kill ? " KILL" : " DROP");
        break;
      case Verb::annotate:
        out += "ANNOTATE " + std::string(to_string(s.annotation)) + " " + scope;
        break;
    }
    out += " := " + expression_text(s.predicate) + "\n";
  }
  return out;
}

namespace {

bool eval_node(const std::vector<Node>& nodes, std::int32_t at, StainMask stains,
               std::uint32_t groups) {
  const Node& n = nodes[static_cast<std::size_t>(at)];
  switch (n.op) {
    case Node::Op::stain: return (((stains >> n.index) & 1u) != 0) == n.positive;
    case Node::Op::group: return (((groups >> n.index) & 1u) != 0) == n.positive;
    case Node::Op::constant: return n.positive;
    case Node::Op::negate: return !eval_node(nodes, n.lhs, stains, groups);
    case Node::Op::both:
      return eval_node(nodes, n.lhs, stains, groups) && eval_node(nodes, n.rhs, stains, groups);
    case Node::Op::either:
      return eval_node(nodes, n.lhs, stains, groups) || eval_node(nodes, n.rhs, stains, groups);
  }
  return false;
}

}  // namespace

Evaluation evaluate(const RuleProgram& program, StainMask positive) {
  const auto& nodes = program.nodes();
  std::uint32_t groups = 0;
  Evaluation ev;
  bool settled = false;
  for (const Step& s : program.steps()) {
    const bool in_scope = s.scope < 0 || ((groups >> s.scope) & 1u) != 0;
    if (settled) {
      if (s.verb == Verb::annotate && in_scope && ev.conflict_step == 0 &&
          eval_node(nodes, s.predicate, positive, groups)) {
        ev.conflict_step = s.number;
      }
      continue;
    }
    switch (s.verb) {
      case Verb::define_group:
        if (eval_node(nodes, s.predicate, positive, groups)) {
          groups |= 1u << s.group;
        } else {
          groups &= ~(1u << s.group);
        }
        break;
      case Verb::exclude:
        if (in_scope && eval_node(nodes, s.predicate, positive, groups)) {
          if (s.mode == ExcludeMode::kill) return {CellClass::excluded, s.number, 0};
          groups &= ~(1u << s.scope);
        }
        break;
      case Verb::annotate:
        if (in_scope && eval_node(nodes, s.predicate, positive, groups)) {
          ev.outcome = s.annotation;
          ev.step = s.number;
          settled = true;
        }
        break;
    }
  }
  return ev;
}

std::string describe_vector(const RuleProgram& program, StainMask positive) {
  std::string out = "{";
  bool first = true;
  for (std::size_t i = 0; i < program.stains().size(); ++i) {
    if ((positive >> i) & 1u) {
      out += (first ? "" : ", ") + program.stains()[i] + "+";
      first = false;
    }
  }
  return out + "}";
}

std::array<std::size_t, kOutcomeCount> LabelAssignment::counts() const {
  std::array<std::size_t, kOutcomeCount> c{};
  for (auto o : outcomes) ++c[index_of(o)];
  return c;
}

void LabelAssignment::write_csv(const std::filesystem::path& path) const {
  csv::Table t;
  t.header = {"instance_id", "outcome", "step_index"};
  for (std::size_t i = 0; i < size(); ++i) {
    t.rows.push_back({std::to_string(ids[i]), std::string(to_string(outcomes[i])),
                      std::to_string(steps[i])});
  }
  csv::write(path, t);
}

LabelAssignment LabelAssignment::read_csv(const std::filesystem::path& path) {
  const auto t = csv::read(path);
  const auto id_col = t.column("instance_id");
  const auto out_col = t.column("outcome");
  const auto step_col = t.column("step_index");
  LabelAssignment a;
  for (const auto& f : t.rows) {
    const auto o = parse_outcome(f[out_col]);
    if (!o) throw Error(ErrorKind::unknown_class, "unknown outcome '" + f[out_col] + "'");
    a.ids.push_back(static_cast<std::uint32_t>(csv::parse_int(f[id_col])));
    a.outcomes.push_back(*o);
    a.steps.push_back(static_cast<int>(csv::parse_int(f[step_col])));
  }
  return a;
}

LabelAssignment run_cascade(const RuleProgram& program, const PositivityMatrix& positivity) {
  // Panel stain -> positivity column; unreferenced stains may be absent.
  std::vector<std::size_t> column(program.stains().size(), PositivityMatrix::npos);
  for (std::size_t i = 0; i < program.stains().size(); ++i) {
    column[i] = positivity.stain_index(program.stains()[i]);
    if (column[i] == PositivityMatrix::npos && program.references_stain(i)) {
      throw Error(ErrorKind::missing_stain,
                  "positivity matrix has no column for stain '" + program.stains()[i] + "'");
    }
  }
  LabelAssignment out;
  out.ids = positivity.ids();
  out.outcomes.resize(positivity.rows());
  out.steps.resize(positivity.rows());
  for (std::size_t r = 0; r < positivity.rows(); ++r) {
    StainMask mask = 0;
    for (std::size_t i = 0; i < column.size(); ++i) {
      if (column[i] != PositivityMatrix::npos && positivity.at(r, column[i])) mask |= StainMask{1} << i;
    }
    const auto ev = evaluate(program, mask);
    if (ev.violated()) {
      throw Error(ErrorKind::exclusivity_violation,
                  "instance " + std::to_string(positivity.ids()[r]) + " " +
                      describe_vector(program, mask) + ": steps " + std::to_string(ev.step) +
                      " and " + std::to_string(ev.conflict_step) + " both annotate");
    }
    out.outcomes[r] = ev.outcome;
    out.steps[r] = ev.step;
  }
  return out;
}

OutcomeTable enumerate_outcomes(const RuleProgram& program) {
  const auto n = program.stains().size();
  if (n > kMaxEnumeratedStains) {
    throw Error(ErrorKind::too_many_stains, "cannot enumerate " + std::to_string(n) +
                                                " stains (limit " +
                                                std::to_string(kMaxEnumeratedStains) + ")");
  }
  OutcomeTable table;
  table.stains = program.stains();
  const StainMask total = StainMask{1} << n;
  table.rows.resize(static_cast<std::size_t>(total));
  for (StainMask v = 0; v < total; ++v) {
    const auto ev = evaluate(program, v);
    table.rows[static_cast<std::size_t>(v)] = ev;
    ++table.counts[index_of(ev.outcome)];
    if (ev.violated()) table.violations.push_back({v, ev.step, ev.conflict_step});
  }
  return table;
}

void OutcomeTable::write_csv(const std::filesystem::path& path) const {
  csv::Table t;
  t.header = stains;
  t.header.insert(t.header.end(), {"outcome", "step_index", "conflict_step"});
  t.rows.reserve(rows.size());
  for (std::size_t v = 0; v < rows.size(); ++v) {
    std::vector<std::string> f;
    f.reserve(t.header.size());
    for (std::size_t i = 0; i < stains.size(); ++i) f.emplace_back(((v >> i) & 1u) ? "1" : "0");
    f.emplace_back(to_string(rows[v].outcome));
    f.push_back(std::to_string(rows[v].step));
    f.push_back(std::to_string(rows[v].conflict_step));
    t.rows.push_back(std::move(f));
  }
  csv::write(path, t);
}

}  // namespace cytogate::cascade
