#include "hessdiag/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <exception>

#include "hessdiag/checkpoint.hpp"
#include "hessdiag/report_io.hpp"
#include "hessdiag/rng.hpp"
#include "json_util.hpp"

namespace hessdiag {

namespace fs = std::filesystem;
using detail::json;

std::vector<std::string> payload_files() {
  using namespace artifacts;
  return {kRunConfig,     kCheckpoint,    kTrainData, kTestData,     kTrainTrace,   kCurvatureJson, kCurvatureText,
          kTrials,        kSweepSummary,  kInteraction, kIntervention, kSummary};
}

namespace {

fs::path resolve(const RunConfig& c, const fs::path& out_dir) {
  return out_dir.empty() ? fs::path(c.output_dir) : out_dir;
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Wall-clock times live here and nowhere else.
void stamp(const fs::path& dir, const std::string& stage) {
  const fs::path p = dir / artifacts::kTimestamps;
  json j = json::object();
  if (fs::exists(p)) {
    try {
      j = json::parse(read_text(p));
      if (!j.is_object()) j = json::object();
    } catch (const json::exception&) {
      j = json::object();
    }
  }
  j[stage] = utc_now();
  write_text(p, j.dump(2) + "\n");
}

struct Context {
  Model model;
  Dataset train;
  Dataset test;
  DiagnosticBatch diagnostic;
};

Context load_context(const RunConfig& c, const fs::path& dir) {
  Model model = load_checkpoint(dir / artifacts::kCheckpoint);
  if (!(model.config == c.model)) {
    throw ConfigError("checkpoint " + (dir / artifacts::kCheckpoint).string() +
                      " was trained with a different model config than this run config");
  }
  Dataset train = load_jsonl(dir / artifacts::kTrainData, Split::kTrain, c.seeds.data);
  Dataset test = load_jsonl(dir / artifacts::kTestData, Split::kTest, c.seeds.data);
  check_batch(model.config, train.batch());
  check_batch(model.config, test.batch());
  DiagnosticBatch diag =
      make_diagnostic_batch(train, static_cast<std::size_t>(c.estimators.diagnostic_batch_size), c.seeds.diagnostic);
  return Context{std::move(model), std::move(train), std::move(test), std::move(diag)};
}

std::vector<std::string> groups_or_all(const std::vector<std::string>& groups, const GroupRegistry& reg) {
  return groups.empty() ? reg.names() : groups;
}

std::vector<Selection> build_selection(const RunConfig& c, const Context& ctx) {
  const auto& s = c.selection;
  switch (s.method) {
    case SelectionMethod::kHeuristic:
      return heuristic_selection(ctx.model, ctx.diagnostic.batch(), groups_or_all(s.groups, ctx.model.registry),
                                 s.per_group);
    case SelectionMethod::kGroups: return group_selection(ctx.model, groups_or_all(s.groups, ctx.model.registry));
    case SelectionMethod::kExplicit: return explicit_selection(ctx.model, s.labels);
  }
  throw ConfigError("unknown selection method");
}

std::string selection_method_label(const RunConfig& c) {
  return c.selection.method == SelectionMethod::kHeuristic ? "heuristic: largest |H_ii| per group"
                                                           : to_string(c.selection.method);
}

}  // namespace

void cmd_train(const RunConfig& c, std::ostream& log, const fs::path& out_dir) {
  validate(c);
  const fs::path dir = resolve(c, out_dir);
  fs::create_directories(dir);
  write_text(dir / artifacts::kRunConfig, dump_run_config(c));

  const GeneratedData data = gen_dataset(data_spec(c), c.seeds.data);
  save_jsonl(data.train, dir / artifacts::kTrainData);
  save_jsonl(data.test, dir / artifacts::kTestData);

  Model model = build_model(c.model);
  const TrainingTrace trace = train(model, data.train, optimizer(c));
  write_text(dir / artifacts::kTrainTrace, train_trace_csv(trace));
  save_checkpoint(model, dir / artifacts::kCheckpoint);
  stamp(dir, "train");
  log << "trained " << to_string(c.model.kind) << " (" << model.params.size() << " parameters, " << c.train.epochs
      << " epochs)";
  if (!trace.epochs.empty()) {
    log << ": final loss " << format_double(trace.epochs.back().loss);
    if (trace.epochs.back().accuracy) log << ", train accuracy " << format_double(*trace.epochs.back().accuracy);
  }
  log << ", test accuracy " << format_double(accuracy(model, data.test.batch())) << "\n";
}

void cmd_curvature(const RunConfig& c, std::ostream& log, const fs::path& out_dir) {
  validate(c);
  const fs::path dir = resolve(c, out_dir);
  const Context ctx = load_context(c, dir);
  CurvatureDocument doc;
  doc.model_kind = to_string(c.model.kind);
  doc.batch = batch_info(ctx.diagnostic);
  doc.estimator = estimator(c);
  doc.rows = curvature_table(ctx.model, ctx.diagnostic.batch(), groups_or_all(c.estimators.groups, ctx.model.registry),
                             doc.estimator);
  write_text(dir / artifacts::kCurvatureJson, curvature_json(doc));
  const std::string table = format_curvature_table(doc.rows);
  write_text(dir / artifacts::kCurvatureText, table);
  stamp(dir, "curvature");
  log << table;
}

void cmd_perturb(const RunConfig& c, std::ostream& log, const fs::path& out_dir) {
  validate(c);
  const fs::path dir = resolve(c, out_dir);
  const Context ctx = load_context(c, dir);
  std::vector<PerturbationTrial> all;
  for (const auto& spec : perturbation_specs(c, ctx.model.registry)) {
    auto trials = sweep(ctx.model, ctx.diagnostic.batch(), spec, ctx.test.batch());
    all.insert(all.end(), trials.begin(), trials.end());
  }
  const auto summary = summarize(all);
  write_text(dir / artifacts::kTrials, trials_csv(all));
  write_text(dir / artifacts::kSweepSummary, sweep_summary_csv(summary));
  stamp(dir, "perturb");
  log << "wrote " << all.size() << " perturbation trials over " << summary.size() << " (group, alpha) cells\n";
}

void cmd_interact(const RunConfig& c, std::ostream& log, const fs::path& out_dir) {
  validate(c);
  const fs::path dir = resolve(c, out_dir);
  const Context ctx = load_context(c, dir);
  InteractionDocument doc;
  doc.model_kind = to_string(c.model.kind);
  doc.batch = batch_info(ctx.diagnostic);
  doc.selection = build_selection(c, ctx);
  doc.report = interaction_report(ctx.model, ctx.diagnostic.batch(), doc.selection, c.selection.mode,
                                  selection_method_label(c));
  write_text(dir / artifacts::kInteraction, interaction_json(doc));
  stamp(dir, "interact");
  if (doc.report.ranked.empty()) {
    log << "no cross-group pairs in the selection\n";
  } else {
    const auto& top = doc.report.ranked.front();
    log << "strongest coupling: (" << top.label_i << ", " << top.label_j << ") normalized "
        << format_double(top.normalized) << ", raw " << format_double(top.raw) << "\n";
  }
}

void cmd_intervene(const RunConfig& c, std::ostream& log, const fs::path& out_dir) {
  validate(c);
  const fs::path dir = resolve(c, out_dir);
  const Context ctx = load_context(c, dir);
  const auto selection = build_selection(c, ctx);
  InterventionDocument doc;
  doc.model_kind = to_string(c.model.kind);
  doc.batch = batch_info(ctx.diagnostic);
  doc.testset_size = ctx.test.size();
  doc.report = run_intervention(ctx.model, ctx.train, selection, ctx.diagnostic.batch(), ctx.test.batch(),
                                intervention(c, ctx.model.registry));
  write_text(dir / artifacts::kIntervention, intervention_json(doc));
  stamp(dir, "intervene");
  const auto& r = doc.report;
  log << "intervention on " << r.target_group << " (lr scale " << format_double(r.lr_scale) << "): coupling "
      << format_double(r.coupling_before) << " -> "
      << (r.coupling_after ? format_double(*r.coupling_after) : std::string("n/a"))
      << (r.complete ? "" : " [incomplete: " + r.note + "]") << "\n";
}

namespace {

std::string opt(const std::optional<double>& v) { return v ? format_double(*v) : "n/a"; }

}  // namespace

void cmd_report(const fs::path& dir, std::ostream& log) {
  using namespace artifacts;
  const std::vector<std::string> sections = {kCurvatureJson, kInteraction, kSweepSummary, kIntervention};
  std::vector<std::string> missing;
  for (const auto& f : sections)
    if (!fs::exists(dir / f)) missing.push_back(f);
  if (missing.size() == sections.size()) {
    std::string names;
    for (const auto& m : missing) names += (names.empty() ? "" : ", ") + m;
    throw MissingArtifactError("no report artifacts in " + dir.string() + " (missing: " + names + ")");
  }
  auto present = [&](const char* f) { return fs::exists(dir / f); };
  auto not_run = [](const char* f) { return std::string("_not run_ (") + f + " missing)\n"; };

  std::string md = "# Hessian diagnosis summary\n\n";
  if (present(kRunConfig)) {
    const RunConfig c = parse_run_config(read_text(dir / kRunConfig), (dir / kRunConfig).string());
    md += "Model: " + to_string(c.model.kind) + ", seeds init=" + std::to_string(c.seeds.init) +
          " data=" + std::to_string(c.seeds.data) + " shuffle=" + std::to_string(c.seeds.shuffle) +
          " noise=" + std::to_string(c.seeds.noise) + " probe=" + std::to_string(c.seeds.probe) +
          " diagnostic=" + std::to_string(c.seeds.diagnostic) + "\n\n";
  }

  md += "## Curvature by attention group\n\n";
  if (present(kCurvatureJson)) {
    const auto doc = parse_curvature_json(read_text(dir / kCurvatureJson), (dir / kCurvatureJson).string());
    md += "Estimator: " + to_string(doc.estimator.mode) + ", probes " + std::to_string(doc.estimator.probes) +
          ", diagnostic batch " + doc.batch.id + "\n\n";
    md += "| Layer | H.Trace | Trace stderr | Eig min | Eig max | Interpretation |\n|---|---|---|---|---|---|\n";
    for (const auto& r : doc.rows) {
      md += "| " + r.report.group + " | " + format_double(r.report.trace) + " | " + format_double(r.report.trace_stderr) +
            " | " + format_double(r.report.eig_min) + " | " + format_double(r.report.eig_max) + " | " +
            to_string(r.label) + " |\n";
    }
  } else {
    md += not_run(kCurvatureJson);
  }

  md += "\n## Off-diagonal interactions\n\n";
  if (present(kInteraction)) {
    const auto doc = parse_interaction_json(read_text(dir / kInteraction), (dir / kInteraction).string());
    md += "Selection: " + doc.report.selection_method + "\n\n";
    md += "| Pair | Raw | Normalized |\n|---|---|---|\n";
    for (const auto& cp : doc.report.ranked) {
      md += "| " + cp.label_i + " / " + cp.label_j + " | " + format_double(cp.raw) + " | " +
            format_double(cp.normalized) + " |\n";
    }
    if (doc.report.ranked.empty()) md += "| (no cross-group pairs) | | |\n";
  } else {
    md += not_run(kInteraction);
  }

  md += "\n## Perturbation sweeps\n\n";
  if (present(kSweepSummary)) {
    const auto rows = parse_sweep_summary_csv(read_text(dir / kSweepSummary), (dir / kSweepSummary).string());
    md += "| Group | Alpha | Trials | Diverged | Mean loss delta | Stderr | Mean variability |\n"
          "|---|---|---|---|---|---|---|\n";
    for (const auto& r : rows) {
      md += "| " + r.group + " | " + format_double(r.alpha) + " | " + std::to_string(r.trials) + " | " +
            std::to_string(r.diverged) + " | " + format_double(r.mean_loss_delta) + " | " +
            format_double(r.stderr_loss_delta) + " | " + opt(r.mean_variability) + " |\n";
    }
  } else {
    md += not_run(kSweepSummary);
  }

  md += "\n## Learning-rate intervention\n\n";
  if (present(kIntervention)) {
    const auto doc = parse_intervention_json(read_text(dir / kIntervention), (dir / kIntervention).string());
    const auto& r = doc.report;
    md += "| Field | Before | After |\n|---|---|---|\n";
    md += "| coupling (" + r.pair_i + ", " + r.pair_j + ") | " + format_double(r.coupling_before) + " | " +
          opt(r.coupling_after) + " |\n";
    md += "| variability | " + opt(r.variability_before) + " | " + opt(r.variability_after) + " |\n\n";
    md += "Target " + r.target_group + ", lr scale " + format_double(r.lr_scale) + ", retrain epochs " +
          std::to_string(r.retrain_epochs) + ", reference perturbation alpha " + format_double(r.reference.alpha) +
          " on " + r.reference.group + " seed " + std::to_string(r.reference.seed) +
          (r.complete ? "" : ". INCOMPLETE: " + r.note) + "\n";
  } else {
    md += not_run(kIntervention);
  }

  write_text(dir / kSummary, md);
  stamp(dir, "report");
  log << "wrote " << (dir / kSummary).string();
  if (!missing.empty()) {
    log << " (not run:";
    for (const auto& m : missing) log << " " << m;
    log << ")";
  }
  log << "\n";
}

void run_all(const RunConfig& c, std::ostream& log, const fs::path& out_dir) {
  const fs::path dir = resolve(c, out_dir);
  cmd_train(c, log, dir);
  cmd_curvature(c, log, dir);
  cmd_perturb(c, log, dir);
  cmd_interact(c, log, dir);
  cmd_intervene(c, log, dir);
  cmd_report(dir, log);
}

namespace {

double fd_gradient_error(const Model& m, Batch b) {
  const FlatVector g = gradient(m.objective, m.params, b);
  double gmax = 0.0;
  for (double x : g) gmax = std::max(gmax, std::abs(x));
  double worst = 0.0;
  FlatVector p = m.params;
  for (std::size_t i = 0; i < p.size(); i += 7) {
    const double h = 1e-5, x = p[i];
    p[i] = x + h;
    const double lp = forward(m.objective, p, b);
    p[i] = x - h;
    const double lm = forward(m.objective, p, b);
    p[i] = x;
    worst = std::max(worst, std::abs((lp - lm) / (2 * h) - g[i]) / std::max(std::abs(g[i]), 0.01 * gmax));
  }
  return worst;
}

}  // namespace

bool run_selftest(std::ostream& out) {
  bool all = true;
  auto check = [&](const std::string& name, bool ok, const std::string& detail) {
    out << (ok ? "PASS " : "FAIL ") << name << ": " << detail << "\n";
    all = all && ok;
  };
  auto guarded = [&](const std::string& name, auto&& body) {
    try {
      body();
    } catch (const std::exception& e) {
      check(name, false, std::string("threw: ") + e.what());
    }
  };

  for (ModelKind kind : {ModelKind::kHierarchical, ModelKind::kSelfAttention, ModelKind::kCrossAttention}) {
    const std::string name = "gradient-fd-" + to_string(kind);
    guarded(name, [&] {
      RunConfig c = default_run_config(kind);
      const Model m = build_model(c.model);
      const auto data = gen_dataset(data_spec_for(c.model, 8, 4), 1);
      const double err = fd_gradient_error(m, data.train.batch());
      check(name, err <= 1e-5, "max relative error " + format_double(err));
    });
  }
  guarded("hvp-symmetry", [&] {
    RunConfig c = default_run_config(ModelKind::kSelfAttention);
    const Model m = build_model(c.model);
    const auto data = gen_dataset(data_spec_for(c.model, 4, 2), 2);
    FlatVector u(m.params.size()), v(m.params.size());
    for (std::size_t i = 0; i < u.size(); ++i) {
      u[i] = rng::normal(21, i);
      v[i] = rng::normal(22, i);
    }
    HvpEngine eng(m.objective, m.params, data.train.batch());
    const FlatVector hu = eng.apply(u), hv = eng.apply(v);
    double a = 0, b = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
      a += hu[i] * v[i];
      b += u[i] * hv[i];
    }
    const double rel = std::abs(a - b) / std::max(std::abs(a), 1e-300);
    check("hvp-symmetry", rel <= 1e-8, "relative asymmetry " + format_double(rel));
  });
  guarded("lanczos-diag", [&] {
    DenseMatrix d(10, 10);
    for (std::size_t i = 0; i < 10; ++i) d(i, i) = static_cast<double>(i + 1);
    const auto r = lanczos_extreme(matrix_operator(d), 200, 1e-8, 1);
    check("lanczos-diag", std::abs(r.eig_min - 1) <= 1e-8 && std::abs(r.eig_max - 10) <= 1e-8,
          "(" + format_double(r.eig_min) + ", " + format_double(r.eig_max) + ")");
  });
  guarded("hutchinson-identity", [&] {
    const auto t = hutchinson_trace(matrix_operator(DenseMatrix::identity(12)), 16, 3);
    check("hutchinson-identity", t.trace == 12.0 && t.standard_error == 0.0, "trace " + format_double(t.trace));
  });
  guarded("classify-fixtures", [&] {
    const bool ok = classify_curvature(-5.72, -0.4186, 0.4493) == CurvatureLabel::kConcaveFragile &&
                    classify_curvature(2.86, -0.0007, 0.0387) == CurvatureLabel::kConvexStable &&
                    classify_curvature(0, 0, 0) == CurvatureLabel::kDegenerateFlat;
    check("classify-fixtures", ok, "three reference rows");
  });
  guarded("config-roundtrip", [&] {
    const RunConfig c = default_run_config(ModelKind::kCrossAttention);
    const RunConfig back = parse_run_config(dump_run_config(c));
    check("config-roundtrip", back == c, "defaults survive dump and parse");
  });
  return all;
}

int exit_code_for_current_exception() noexcept {
  try {
    throw;
  } catch (const ConfigError&) {
    return kExitConfig;
  } catch (const DivergenceError&) {
    return kExitDivergence;
  } catch (const NonFiniteError&) {
    return kExitDivergence;
  } catch (const MissingArtifactError&) {
    return kExitMissingArtifact;
  } catch (...) {
    return kExitFailure;
  }
}

}  // namespace hessdiag
