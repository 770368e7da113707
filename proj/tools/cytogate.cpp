// cytogate: command-line front end for the slide gating and evaluation pipeline.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

#include "cytogate/cascade.hpp"
#include "cytogate/classifier.hpp"
#include "cytogate/csv.hpp"
#include "cytogate/cv_split.hpp"
#include "cytogate/error.hpp"
#include "cytogate/instance_stats.hpp"
#include "cytogate/metrics.hpp"
#include "cytogate/patches.hpp"
#include "cytogate/png_io.hpp"
#include "cytogate/service.hpp"
#include "cytogate/slide_io.hpp"
#include "cytogate/synthetic.hpp"

namespace fs = std::filesystem;
using namespace cytogate;

namespace {

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

cascade::RuleProgram load_rules(const fs::path& path) {
  return path.empty() ? cascade::table1_program() : cascade::load_rule_program(path);
}

nlohmann::json count_json(const std::array<std::size_t, kOutcomeCount>& counts) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < kOutcomeCount; ++i) j[std::string(kOutcomeNames[i])] = counts[i];
  return j;
}

// Instance maps come either as a bundle directory or a raw uint32 file of
// known size.
LabelGrid load_instance_map(const fs::path& path, const std::string& size) {
  if (fs::is_directory(path)) return SlideBundle::open(path).read_instance_map();
  int w = 0, h = 0;
  char x = 0;
  std::istringstream in(size);
  if (!(in >> w >> x >> h) || x != 'x' || w <= 0 || h <= 0) {
    throw Error(ErrorKind::invalid_argument,
                "raw instance map " + path.string() + " needs --size WIDTHxHEIGHT");
  }
  return read_instance_raw(path, w, h);
}

bool sentinel_name(const std::string& name) {
  const auto c = parse_outcome(name);
  return c && is_sentinel(*c);
}

std::string ratio_cell(const metrics::Ratio& r) {
  return r.defined() ? csv::format_double(r.value()) : "NaN";
}

// ---------------------------------------------------------------------------

struct InspectArgs {
  fs::path bundle;
};

int run_inspect(const InspectArgs& a) {
  const auto b = SlideBundle::open(a.bundle);
  std::cout << b.manifest().to_json().dump(2) << '\n';
  return 0;
}

struct StatsArgs {
  fs::path bundle;
  std::vector<std::string> channels;
  int tile = 512;
  unsigned threads = 1;
  fs::path out;
};

int run_stats(const StatsArgs& a) {
  const auto b = SlideBundle::open(a.bundle);
  const auto channels = a.channels.empty() ? b.manifest().channels : a.channels;
  const auto table = compute_stats(b, channels, {a.tile, a.threads});
  table.write_csv(a.out);
  std::cerr << table.rows.size() << " instances, " << channels.size() << " channels\n";
  return 0;
}

struct GateArgs {
  fs::path stats;
  fs::path thresholds;
  fs::path out;
};

int run_gate(const GateArgs& a) {
  const auto stats = InstanceStatsTable::read_csv(a.stats);
  const auto pm = apply_thresholds(stats, ThresholdSet::load(a.thresholds));
  pm.write_csv(a.out);
  for (std::size_t c = 0; c < pm.cols(); ++c) {
    std::cerr << pm.stains()[c] << ": " << pm.positive_count(c) << "/" << pm.rows() << " positive\n";
  }
  return 0;
}

struct LabelArgs {
  fs::path rules;
  fs::path positivity;
  fs::path out;
};

int run_label(const LabelArgs& a) {
  const auto program = load_rules(a.rules);
  const auto labels = cascade::run_cascade(program, PositivityMatrix::read_csv(a.positivity));
  labels.write_csv(a.out);
  std::cerr << count_json(labels.counts()).dump() << '\n';
  return 0;
}

struct EnumerateArgs {
  fs::path rules;
  fs::path out;
};

int run_enumerate(const EnumerateArgs& a) {
  const auto program = load_rules(a.rules);
  const auto table = cascade::enumerate_outcomes(program);
  if (!a.out.empty()) table.write_csv(a.out);
  nlohmann::json report{{"stains", table.stains},
                        {"vectors", table.rows.size()},
                        {"counts", count_json(table.counts)},
                        {"violations", table.violations.size()}};
  auto examples = nlohmann::json::array();
  for (std::size_t i = 0; i < std::min<std::size_t>(table.violations.size(), 10); ++i) {
    const auto& v = table.violations[i];
    examples.push_back({{"vector", cascade::describe_vector(program, v.vector)},
                        {"first_step", v.first_step},
                        {"second_step", v.second_step}});
  }
  report["violation_examples"] = examples;
  std::cout << report.dump(2) << '\n';
  return table.violations.empty() ? 0 : 3;
}

struct MergeArgs {
  fs::path bundle;
  std::vector<std::string> channels;
  fs::path out;
};

int run_merge(const MergeArgs& a) {
  const auto b = SlideBundle::open(a.bundle);
  const auto merged = merge_channels_sum(b, a.channels);
  png::write_gray(a.out, merged.pixels, b.manifest().bit_depth);
  std::cerr << "wrote " << merged.name << " to " << a.out.string() << '\n';
  return 0;
}

struct PatchesArgs {
  fs::path bundle;
  fs::path labels;
  fs::path stats;
  fs::path out;
  std::vector<std::string> channels;
  bool append = false;
};

int run_patches(const PatchesArgs& a) {
  const auto b = SlideBundle::open(a.bundle);
  const auto channels = a.channels.empty() ? b.manifest().channels : a.channels;
  const auto stats = a.stats.empty() ? compute_stats(b, {}) : InstanceStatsTable::read_csv(a.stats);
  const auto labels = cascade::LabelAssignment::read_csv(a.labels);

  patches::PatchExtractor extractor(b, channels);
  patches::DatasetWriter writer(a.out, channels, a.append);
  std::size_t written = 0, skipped_label = 0, skipped_missing = 0, skipped_bounds = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (is_sentinel(labels.outcomes[i])) {
      ++skipped_label;
      continue;
    }
    const auto* row = stats.find(labels.ids[i]);
    if (!row) {
      ++skipped_missing;
      continue;
    }
    try {
      writer.add(extractor.extract(row->centroid_x, row->centroid_y, row->id, labels.outcomes[i]));
      ++written;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::out_of_bounds) throw;
      ++skipped_bounds;
    }
  }
  writer.finish();
  std::cerr << written << " patches written; skipped " << skipped_label << " excluded/unlabeled, "
            << skipped_missing << " without stats, " << skipped_bounds << " out of bounds\n";
  return 0;
}

struct TrainArgs {
  fs::path data;
  fs::path out;
  classifier::TrainConfig config;
  std::vector<std::string> slides;
  fs::path loss_trace;
};

int run_train(const TrainArgs& a) {
  auto dataset = patches::PatchDataset::load(a.data);
  if (!a.slides.empty()) dataset = dataset.subset_slides(a.slides);
  patches::BalancedSampler probe(dataset.manifest, a.config.seed);
  for (auto c : probe.missing_classes()) {
    std::cerr << "warning: no training patches for class " << to_string(c) << '\n';
  }
  const auto result = classifier::train(dataset, a.config);
  result.model.save(a.out);
  if (!a.loss_trace.empty()) {
    std::ofstream trace(a.loss_trace, std::ios::trunc);
    trace << "step,loss\n";
    for (std::size_t i = 0; i < result.loss_trace.size(); ++i) {
      trace << i << ',' << csv::format_double(result.loss_trace[i]) << '\n';
    }
  }
  std::cerr << "trained on " << dataset.size() << " patches, final batch loss "
            << csv::format_double(result.loss_trace.back()) << '\n';
  return 0;
}

struct PredictArgs {
  fs::path model;
  fs::path data;
  std::string slide;
  fs::path out;
};

int run_predict(const PredictArgs& a) {
  const auto model = classifier::SoftmaxModel::load(a.model);
  auto dataset = patches::PatchDataset::load(a.data);
  if (!a.slide.empty()) {
    dataset = dataset.subset_slides({a.slide});
  } else {
    for (const auto& r : dataset.manifest.records) {
      if (r.slide_id != dataset.manifest.records.front().slide_id) {
        throw Error(ErrorKind::invalid_argument,
                    "dataset holds several slides; pick one with --slide");
      }
    }
  }
  const auto predictions = classifier::predict(model, dataset);
  classifier::write_predictions_csv(a.out, model, predictions);
  std::cerr << predictions.size() << " predictions\n";
  return 0;
}

struct SplitArgs {
  fs::path cohort;
  std::uint64_t seed = 0;
  std::size_t folds = 5;
  std::size_t max_attempts = 10000;
  fs::path out;
};

int run_split(const SplitArgs& a) {
  const auto plan = cv::make_folds(cv::CohortTable::read_csv(a.cohort), a.seed,
                                   {a.folds, a.max_attempts});
  write_json(a.out, plan.to_json());
  std::cerr << "plan found after " << plan.attempts << " attempts\n";
  return 0;
}

struct EvalArgs {
  std::vector<fs::path> pred;
  std::vector<fs::path> truth;
  std::vector<fs::path> pred_classes;
  std::vector<fs::path> truth_classes;
  std::string size;
  fs::path parents;
  bool default_parents = false;
  bool skip_missing = false;
  fs::path emit_csv;
  fs::path out;
};

int run_eval(const EvalArgs& a) {
  const std::size_t n = a.pred.size();
  if (a.truth.size() != n || a.pred_classes.size() != n || a.truth_classes.size() != n) {
    throw Error(ErrorKind::invalid_argument,
                "--pred, --truth, --pred-classes and --truth-classes must repeat equally often");
  }
  const bool bounded = a.default_parents || !a.parents.empty();
  metrics::DetectionResult detection;
  std::vector<metrics::LabelPair> labelled;
  std::size_t matched = 0, unmatched_pred = 0, unmatched_truth = 0, dropped = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto pred = load_instance_map(a.pred[i], a.size);
    const auto truth = load_instance_map(a.truth[i], a.size);
    const auto d = metrics::detection_pr(pred, truth);
    detection.predictions += d.predictions;
    detection.truths += d.truths;
    detection.true_positive += d.true_positive;
    detection.false_positive += d.false_positive;
    detection.covered_truths += d.covered_truths;
    detection.false_negative += d.false_negative;

    const auto pairs = metrics::match_instances(pred, truth);
    matched += pairs.pairs.size();
    unmatched_pred += pairs.unmatched_pred.size();
    unmatched_truth += pairs.unmatched_truth.size();
    const auto pc = metrics::read_class_labels(a.pred_classes[i]);
    const auto tc = metrics::read_class_labels(a.truth_classes[i]);
    for (const auto& p : pairs.pairs) {
      const auto pi = pc.find(p.pred);
      const auto ti = tc.find(p.truth);
      const bool usable = pi != pc.end() && ti != tc.end() && !sentinel_name(pi->second) &&
                          !sentinel_name(ti->second);
      if (!usable && a.skip_missing) {
        ++dropped;
        continue;
      }
      if (pi == pc.end() || ti == tc.end()) {
        throw Error(ErrorKind::invalid_argument,
                    "matched pair (" + std::to_string(p.pred) + ", " + std::to_string(p.truth) +
                        ") lacks a class; pass --skip-missing to drop such pairs");
      }
      labelled.push_back({pi->second, ti->second});
    }
  }
  detection.precision = {detection.true_positive, detection.predictions};
  detection.recall = {detection.covered_truths, detection.truths};

  nlohmann::json report;
  report["slides"] = n;
  report["detection"] = detection.to_json();
  report["matching"] = {{"pairs", matched},
                        {"unmatched_pred", unmatched_pred},
                        {"unmatched_truth", unmatched_truth},
                        {"dropped_pairs", dropped}};
  if (bounded) {
    const auto pm = a.parents.empty() ? metrics::default_parent_map() : metrics::read_parent_map(a.parents);
    report["bounded"] = metrics::bounded_metrics(labelled, pm).to_json();
  } else {
    const auto cm = metrics::class_metrics(labelled);
    report["classification"] = cm.to_json();
    if (!a.emit_csv.empty()) {
      csv::Table t;
      t.header = {"class", "tp", "fp", "tn", "fn", "ppv", "npv", "prevalence",
                  "prevalence_normalized_ppv"};
      for (const auto& c : cm.per_class) {
        t.rows.push_back({c.name, std::to_string(c.tp), std::to_string(c.fp), std::to_string(c.tn),
                          std::to_string(c.fn), ratio_cell(c.ppv), ratio_cell(c.npv),
                          ratio_cell(c.prevalence),
                          std::isfinite(c.prevalence_normalized_ppv)
                              ? csv::format_double(c.prevalence_normalized_ppv)
                              : "NaN"});
      }
      csv::write(a.emit_csv, t);
    }
    std::cerr << "accuracy " << ratio_cell(cm.accuracy) << " over " << cm.pairs << " pairs\n";
    for (const auto& c : cm.per_class) {
      std::cerr << "  " << c.name << " ppv " << ratio_cell(c.ppv) << " npv " << ratio_cell(c.npv)
                << '\n';
    }
  }
  write_json(a.out, report);
  return 0;
}

struct FriedmanArgs {
  fs::path input;
  fs::path out;
};

int run_friedman(const FriedmanArgs& a) {
  // First column names the block; the remaining columns are treatments.
  const auto t = csv::read(a.input);
  if (t.header.size() < 3) throw Error(ErrorKind::format, "need a block column and >= 2 treatments");
  std::vector<std::vector<double>> values;
  for (const auto& row : t.rows) {
    std::vector<double> block;
    for (std::size_t c = 1; c < row.size(); ++c) {
      block.push_back(row[c].empty() ? std::nan("") : csv::parse_double(row[c]));
    }
    values.push_back(std::move(block));
  }
  auto j = metrics::friedman_test(values).to_json();
  j["treatments"] = std::vector<std::string>(t.header.begin() + 1, t.header.end());
  write_json(a.out, j);
  return 0;
}

struct ServeArgs {
  fs::path root;
  fs::path rules;
  fs::path static_dir;
  std::string host = "127.0.0.1";
  int port = 8080;
};

int run_serve(const ServeArgs& a) {
  service::ThresholdService svc({a.root, a.static_dir}, load_rules(a.rules));
  for (const auto& w : svc.warnings()) std::cerr << "warning: " << w << '\n';
  httplib::Server server;
  svc.mount(server);
  std::cerr << "serving " << svc.list_slides().size() << " slides on http://" << a.host << ':'
            << a.port << "/\n";
  if (!server.listen(a.host, a.port)) {
    throw Error(ErrorKind::io, "cannot listen on " + a.host + ":" + std::to_string(a.port));
  }
  return 0;
}

struct SynthArgs {
  fs::path out;
  synthetic::CohortSpec spec;
};

int run_synth(const SynthArgs& a) {
  const auto cohort = synthetic::write_cohort(a.out, a.spec);
  std::cerr << cohort.slides.size() << " slides for " << cohort.patients().size() << " patients in "
            << a.out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cytogate: marker gating, patch datasets and evaluation for multiplexed slides"};
  app.require_subcommand(1);
  std::function<int()> action;

  InspectArgs inspect;
  auto* c_inspect = app.add_subcommand("inspect", "print a bundle manifest");
  c_inspect->add_option("bundle", inspect.bundle)->required();
  c_inspect->callback([&] { action = [&] { return run_inspect(inspect); }; });

  StatsArgs stats;
  auto* c_stats = app.add_subcommand("stats", "per-instance area, centroid and mean intensities");
  c_stats->add_option("bundle,--bundle", stats.bundle)->required();
  c_stats->add_option("--channels", stats.channels, "default: all")->delimiter(',');
  c_stats->add_option("--tile", stats.tile, "rows per streamed band")->check(CLI::PositiveNumber);
  c_stats->add_option("--threads", stats.threads)->check(CLI::PositiveNumber);
  c_stats->add_option("-o,--out", stats.out)->required();
  c_stats->callback([&] { action = [&] { return run_stats(stats); }; });

  GateArgs gate;
  auto* c_gate = app.add_subcommand("gate", "apply thresholds to a stats table");
  c_gate->add_option("--stats", gate.stats)->required();
  c_gate->add_option("--thresholds", gate.thresholds)->required();
  c_gate->add_option("-o,--out", gate.out)->required();
  c_gate->callback([&] { action = [&] { return run_gate(gate); }; });

  LabelArgs label;
  auto* c_label = app.add_subcommand("label", "run the label cascade over a positivity matrix");
  c_label->add_option("--rules", label.rules, "default: built-in cascade program");
  c_label->add_option("--positivity", label.positivity)->required();
  c_label->add_option("-o,--out", label.out)->required();
  c_label->callback([&] { action = [&] { return run_label(label); }; });

  EnumerateArgs enumerate;
  auto* c_enum = app.add_subcommand("enumerate", "evaluate every positivity vector of the panel");
  c_enum->add_option("--rules", enumerate.rules);
  c_enum->add_option("-o,--out", enumerate.out, "optional per-vector CSV");
  c_enum->callback([&] { action = [&] { return run_enumerate(enumerate); }; });

  MergeArgs merge;
  auto* c_merge = app.add_subcommand("merge", "sum channels into one segmentation input");
  c_merge->add_option("--bundle", merge.bundle)->required();
  c_merge->add_option("--channels", merge.channels)->required()->delimiter(',');
  c_merge->add_option("-o,--out", merge.out)->required();
  c_merge->callback([&] { action = [&] { return run_merge(merge); }; });

  PatchesArgs pat;
  auto* c_patches = app.add_subcommand("patches", "cut labeled 41x41 patches at 0.5 um/px");
  c_patches->add_option("--bundle", pat.bundle)->required();
  c_patches->add_option("--labels", pat.labels)->required();
  c_patches->add_option("--stats", pat.stats, "centroids; computed when omitted");
  c_patches->add_option("--channels", pat.channels, "default: all")->delimiter(',');
  c_patches->add_option("--out", pat.out)->required();
  c_patches->add_flag("--append", pat.append, "add to an existing dataset");
  c_patches->callback([&] { action = [&] { return run_patches(pat); }; });

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "train the softmax baseline");
  c_train->add_option("--data", tr.data)->required();
  c_train->add_option("--out", tr.out)->required();
  c_train->add_option("--steps", tr.config.steps)->check(CLI::PositiveNumber);
  c_train->add_option("--batch", tr.config.batch_size)->check(CLI::PositiveNumber);
  c_train->add_option("--lr", tr.config.learning_rate)->check(CLI::NonNegativeNumber);
  c_train->add_option("--seed", tr.config.seed);
  c_train->add_option("--slides", tr.slides, "train on these slides only")->delimiter(',');
  c_train->add_option("--loss-trace", tr.loss_trace);
  c_train->callback([&] { action = [&] { return run_train(tr); }; });

  PredictArgs pr;
  auto* c_predict = app.add_subcommand("predict", "class probabilities for one slide");
  c_predict->add_option("--model", pr.model)->required();
  c_predict->add_option("--data", pr.data)->required();
  c_predict->add_option("--slide", pr.slide);
  c_predict->add_option("-o,--out", pr.out)->required();
  c_predict->callback([&] { action = [&] { return run_predict(pr); }; });

  SplitArgs sp;
  auto* c_split = app.add_subcommand("split", "patient-level cross-validation folds");
  c_split->add_option("--cohort", sp.cohort)->required();
  c_split->add_option("--seed", sp.seed);
  c_split->add_option("--folds", sp.folds)->check(CLI::Range(2, 1000));
  c_split->add_option("--max-attempts", sp.max_attempts)->check(CLI::PositiveNumber);
  c_split->add_option("-o,--out", sp.out, "default: stdout");
  c_split->callback([&] { action = [&] { return run_split(sp); }; });

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "detection, matching and class metrics");
  c_eval->add_option("--pred", ev.pred, "bundle dir or raw map; repeat per slide")->required();
  c_eval->add_option("--truth", ev.truth)->required();
  c_eval->add_option("--pred-classes", ev.pred_classes)->required();
  c_eval->add_option("--truth-classes", ev.truth_classes)->required();
  c_eval->add_option("--size", ev.size, "WIDTHxHEIGHT for raw maps");
  auto* parents_opt = c_eval->add_option("--parents", ev.parents, "parent-map JSON: bounded metrics");
  c_eval->add_flag("--default-parents", ev.default_parents, "bounded metrics with the built-in map")
      ->excludes(parents_opt);
  c_eval->add_flag("--skip-missing", ev.skip_missing,
                   "drop pairs lacking a class or labeled excluded/unlabeled");
  c_eval->add_option("--emit-csv", ev.emit_csv, "per-class CSV");
  c_eval->add_option("-o,--out", ev.out, "report JSON; default stdout");
  c_eval->callback([&] { action = [&] { return run_eval(ev); }; });

  FriedmanArgs fr;
  auto* c_friedman = app.add_subcommand("friedman", "Friedman test over a block x treatment CSV");
  c_friedman->add_option("input,--input", fr.input)->required();
  c_friedman->add_option("-o,--out", fr.out);
  c_friedman->callback([&] { action = [&] { return run_friedman(fr); }; });

  ServeArgs sv;
  auto* c_serve = app.add_subcommand("serve", "HTTP threshold service");
  c_serve->add_option("--root", sv.root)->required();
  c_serve->add_option("--rules", sv.rules);
  c_serve->add_option("--static", sv.static_dir, "UI assets served at /");
  c_serve->add_option("--host", sv.host);
  c_serve->add_option("--port", sv.port)->check(CLI::Range(0, 65535));
  c_serve->callback([&] { action = [&] { return run_serve(sv); }; });

  SynthArgs sy;
  auto* c_synth = app.add_subcommand("synth", "write a synthetic 14-class cohort");
  c_synth->add_option("--out", sy.out)->required();
  c_synth->add_option("--patients", sy.spec.patients)->check(CLI::PositiveNumber);
  c_synth->add_option("--slides-per-patient", sy.spec.slides_per_patient)->check(CLI::PositiveNumber);
  c_synth->add_option("--width", sy.spec.slide.width)->check(CLI::PositiveNumber);
  c_synth->add_option("--height", sy.spec.slide.height)->check(CLI::PositiveNumber);
  c_synth->add_option("--seed", sy.spec.seed);
  c_synth->callback([&] { action = [&] { return run_synth(sy); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    return action();
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.kind()) << "]: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
