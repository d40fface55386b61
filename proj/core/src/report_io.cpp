#include "hessdiag/report_io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json_util.hpp"

namespace hessdiag {

using detail::Fields;
using detail::json;
using detail::number_or_null;

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& text) {
  if (text == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (text == "inf") return std::numeric_limits<double>::infinity();
  if (text == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto* first = text.data();
  const auto* last = text.data() + text.size();
  const auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc{} || res.ptr != last || text.empty()) throw IoError("not a number: '" + text + "'");
  return v;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("missing artifact: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

BatchInfo batch_info(const DiagnosticBatch& b) { return BatchInfo{b.id(), b.source, b.seed, b.indices}; }

namespace {

// Reader-side failures are I/O problems, not user config problems.
template <class F>
auto as_io(const std::string& source, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw IoError(std::string("invalid report ") + e.what());
  } catch (const json::exception& e) {
    throw IoError("invalid report " + source + ": " + e.what());
  }
}

[[noreturn]] void bad(const std::string& source, const std::string& what) {
  throw IoError("invalid report " + source + ": " + what);
}

json header(const char* kind, const std::string& model_kind) {
  return {{"schema_version", kReportSchemaVersion}, {"kind", kind}, {"model_kind", model_kind}};
}

void check_header(Fields& f, const char* kind, const std::string& source) {
  if (f.integer("schema_version") != kReportSchemaVersion) bad(source, "unsupported schema_version");
  if (f.string("kind") != kind) bad(source, std::string("expected kind '") + kind + "'");
}

json to_json(const BatchInfo& b) {
  return {{"id", b.id}, {"source", b.source}, {"seed", b.seed}, {"size", b.indices.size()}, {"indices", b.indices}};
}

BatchInfo batch_from(Fields f) {
  BatchInfo b;
  b.id = f.string("id");
  b.source = f.string("source");
  b.seed = f.seed("seed");
  const auto size = f.integer("size");
  for (const auto& x : f.raw("indices")) b.indices.push_back(x.get<std::size_t>());
  if (static_cast<std::size_t>(size) != b.indices.size()) f.fail("diagnostic batch size does not match its indices");
  f.finish();
  return b;
}

json matrix_json(const DenseMatrix& m) {
  json rows = json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (std::size_t j = 0; j < m.cols(); ++j) row.push_back(number_or_null(m(i, j)));
    rows.push_back(row);
  }
  return rows;
}

DenseMatrix matrix_from(const json& j, std::size_t n, const std::string& source, const char* what) {
  if (!j.is_array() || j.size() != n) bad(source, std::string(what) + " must be a square array of size " + std::to_string(n));
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!j[i].is_array() || j[i].size() != n) bad(source, std::string(what) + " row has the wrong length");
    for (std::size_t k = 0; k < n; ++k) {
      m(i, k) = j[i][k].is_null() ? std::numeric_limits<double>::quiet_NaN() : j[i][k].get<double>();
    }
  }
  return m;
}

// ---- curvature ----

void check_rows(const std::vector<CurvatureVerdict>& rows, double flat_eps, const std::string& source) {
  for (const auto& r : rows) {
    const auto& s = r.report;
    const std::string at = "group '" + s.group + "': ";
    if (!(s.eig_min <= s.eig_max)) bad(source, at + "eig_min exceeds eig_max");
    if (s.probes_used < 1) bad(source, at + "probes_used must be at least 1");
    if (!(s.trace_stderr >= 0.0)) bad(source, at + "trace_stderr must be nonnegative");
    if (s.dim == 0) bad(source, at + "dim must be positive");
    if (classify_curvature(s.trace, s.eig_min, s.eig_max, flat_eps) != r.label) {
      bad(source, at + "label does not follow from the stored trace");
    }
    if (s.spectrum) {
      if (s.spectrum->size() != s.dim) bad(source, at + "spectrum length differs from dim");
      for (std::size_t i = 1; i < s.spectrum->size(); ++i)
        if ((*s.spectrum)[i - 1] > (*s.spectrum)[i]) bad(source, at + "spectrum is not ascending");
    }
  }
}

}  // namespace

std::string curvature_json(const CurvatureDocument& doc) {
  check_rows(doc.rows, doc.estimator.flat_eps, "curvature.json");
  json j = header("curvature", doc.model_kind);
  j["diagnostic_batch"] = to_json(doc.batch);
  const auto& e = doc.estimator;
  j["estimator"] = {{"mode", to_string(e.mode)},         {"probes", e.probes},
                    {"lanczos_iters", e.lanczos_iters},  {"lanczos_tol", e.lanczos_tol},
                    {"probe_seed", e.probe_seed},        {"full_spectrum", e.full_spectrum},
                    {"flat_eps", e.flat_eps}};
  json rows = json::array();
  for (const auto& v : doc.rows) {
    const auto& r = v.report;
    json row = {{"group", r.group},
                {"dim", r.dim},
                {"mode", r.mode},
                {"trace", number_or_null(r.trace)},
                {"trace_stderr", number_or_null(r.trace_stderr)},
                {"eig_min", number_or_null(r.eig_min)},
                {"eig_max", number_or_null(r.eig_max)},
                {"probes_used", r.probes_used},
                {"lanczos_iters", r.lanczos_iters},
                {"lanczos_converged", r.lanczos_converged},
                {"probe_seed", r.probe_seed},
                {"lanczos_seed", r.lanczos_seed},
                {"label", to_string(v.label)}};
    row["spectrum"] = r.spectrum ? json(*r.spectrum) : json(nullptr);
    rows.push_back(row);
  }
  j["rows"] = rows;
  return j.dump(2) + "\n";
}

CurvatureDocument parse_curvature_json(const std::string& text, const std::string& source) {
  return as_io(source, [&] {
    const json j = detail::parse_json(text, source);
    Fields f(j, "", source);
    check_header(f, "curvature", source);
    CurvatureDocument doc;
    doc.model_kind = f.string("model_kind");
    doc.batch = batch_from(f.object("diagnostic_batch"));
    Fields e = f.object("estimator");
    doc.estimator.mode = parse_estimator_mode(e.string("mode"));
    doc.estimator.probes = e.int32("probes");
    doc.estimator.lanczos_iters = e.int32("lanczos_iters");
    doc.estimator.lanczos_tol = e.number("lanczos_tol");
    doc.estimator.probe_seed = e.seed("probe_seed");
    doc.estimator.full_spectrum = e.boolean("full_spectrum");
    doc.estimator.flat_eps = e.number("flat_eps");
    e.finish();
    const json& rows = f.raw("rows");
    if (!rows.is_array()) bad(source, "rows must be an array");
    for (std::size_t i = 0; i < rows.size(); ++i) {
      Fields r(rows[i], "rows[" + std::to_string(i) + "]", source);
      CurvatureVerdict v;
      auto& s = v.report;
      s.group = r.string("group");
      s.dim = static_cast<std::size_t>(r.integer("dim"));
      s.mode = r.string("mode");
      s.trace = r.number("trace");
      s.trace_stderr = r.number("trace_stderr");
      s.eig_min = r.number("eig_min");
      s.eig_max = r.number("eig_max");
      s.probes_used = r.int32("probes_used");
      s.lanczos_iters = r.int32("lanczos_iters");
      s.lanczos_converged = r.boolean("lanczos_converged");
      s.probe_seed = r.seed("probe_seed");
      s.lanczos_seed = r.seed("lanczos_seed");
      v.label = parse_curvature_label(r.string("label"));
      if (!r.raw("spectrum").is_null()) s.spectrum = r.numbers("spectrum");
      r.finish();
      doc.rows.push_back(std::move(v));
    }
    f.finish();
    check_rows(doc.rows, doc.estimator.flat_eps, source);
    return doc;
  });
}

// ---- interaction ----

namespace {

void check_interaction(const InteractionDocument& doc, const std::string& source) {
  const auto& m = doc.report.matrix;
  const std::size_t k = m.labels.size();
  if (k == 0) bad(source, "empty selection");
  if (m.groups.size() != k || doc.selection.size() != k) bad(source, "labels, groups and selection differ in length");
  if (m.raw.rows() != k || m.normalized.rows() != k) bad(source, "matrix size differs from the label count");
  const double scale = std::max(m.raw.max_abs(), std::numeric_limits<double>::min());
  for (std::size_t i = 0; i < k; ++i) {
    if (!std::isnan(m.normalized(i, i))) bad(source, "normalized diagonal must be the null sentinel");
    for (std::size_t j = 0; j < k; ++j) {
      if (std::abs(m.raw(i, j) - m.raw(j, i)) > 1e-8 * scale) bad(source, "raw matrix is not symmetric");
      if (i == j) continue;
      const double v = m.normalized(i, j);
      if (!(v >= -1.0 && v <= 1.0)) bad(source, "normalized entry outside [-1, 1]");
      if (v != m.normalized(j, i)) bad(source, "normalized matrix is not symmetric");
    }
  }
  for (std::size_t r = 0; r < doc.report.ranked.size(); ++r) {
    const auto& c = doc.report.ranked[r];
    if (c.i >= k || c.j >= k || c.i >= c.j) bad(source, "ranked coupling has bad indices");
    if (m.groups[c.i] == m.groups[c.j]) bad(source, "ranked coupling is not cross-group");
    if (r > 0 && std::abs(c.normalized) > std::abs(doc.report.ranked[r - 1].normalized)) {
      bad(source, "ranked couplings are not sorted by |normalized|");
    }
  }
}

}  // namespace

std::string interaction_json(const InteractionDocument& doc) {
  check_interaction(doc, "interaction.json");
  const auto& m = doc.report.matrix;
  json j = header("interaction", doc.model_kind);
  j["diagnostic_batch"] = to_json(doc.batch);
  j["selection_method"] = doc.report.selection_method;
  j["mode"] = m.mode == CouplingMode::kRaw ? "raw" : "normalized";
  j["coupling_epsilon"] = kCouplingEpsilon;
  json sel = json::array();
  for (const auto& s : doc.selection) sel.push_back({{"label", s.label}, {"group", s.group}, {"indices", s.indices}});
  j["selection"] = sel;
  j["labels"] = m.labels;
  j["groups"] = m.groups;
  j["raw"] = matrix_json(m.raw);
  j["normalized"] = matrix_json(m.normalized);
  json ranked = json::array();
  for (const auto& c : doc.report.ranked) {
    ranked.push_back({{"i", c.i},
                      {"j", c.j},
                      {"label_i", c.label_i},
                      {"label_j", c.label_j},
                      {"raw", c.raw},
                      {"normalized", c.normalized}});
  }
  j["ranked"] = ranked;
  return j.dump(2) + "\n";
}

InteractionDocument parse_interaction_json(const std::string& text, const std::string& source) {
  return as_io(source, [&] {
    const json j = detail::parse_json(text, source);
    Fields f(j, "", source);
    check_header(f, "interaction", source);
    InteractionDocument doc;
    doc.model_kind = f.string("model_kind");
    doc.batch = batch_from(f.object("diagnostic_batch"));
    doc.report.selection_method = f.string("selection_method");
    const std::string mode = f.string("mode");
    if (mode != "raw" && mode != "normalized") bad(source, "mode must be raw or normalized");
    auto& m = doc.report.matrix;
    m.mode = mode == "raw" ? CouplingMode::kRaw : CouplingMode::kNormalized;
    f.number("coupling_epsilon");
    for (const auto& s : f.raw("selection")) {
      doc.selection.push_back(Selection{s.at("label").get<std::string>(), s.at("group").get<std::string>(),
                                        s.at("indices").get<IndexSet>()});
    }
    m.labels = f.strings("labels");
    m.groups = f.strings("groups");
    m.raw = matrix_from(f.raw("raw"), m.labels.size(), source, "raw");
    m.normalized = matrix_from(f.raw("normalized"), m.labels.size(), source, "normalized");
    for (const auto& c : f.raw("ranked")) {
      doc.report.ranked.push_back(Coupling{c.at("i").get<std::size_t>(), c.at("j").get<std::size_t>(),
                                           c.at("label_i").get<std::string>(), c.at("label_j").get<std::string>(),
                                           c.at("raw").get<double>(), c.at("normalized").get<double>()});
    }
    f.finish();
    check_interaction(doc, source);
    return doc;
  });
}

// ---- intervention ----

namespace {

void check_intervention(const InterventionDocument& doc, const std::string& source) {
  const auto& r = doc.report;
  if (!(r.lr_scale > 0.0 && r.lr_scale <= 1.0)) bad(source, "lr_scale outside (0, 1]");
  if (r.retrain_epochs < 0) bad(source, "retrain_epochs must be nonnegative");
  auto frac = [&](const std::optional<double>& v, const char* name) {
    if (v && !(*v >= 0.0 && *v <= 1.0)) bad(source, std::string(name) + " outside [0, 1]");
  };
  frac(r.variability_before, "variability_before");
  frac(r.variability_after, "variability_after");
  if (r.complete && !r.coupling_after) bad(source, "complete report lacks coupling_after");
  if (!(r.coupling_before >= -1.0 && r.coupling_before <= 1.0)) bad(source, "coupling_before outside [-1, 1]");
}

json optional_number(const std::optional<double>& v) { return v ? number_or_null(*v) : json(nullptr); }

std::optional<double> optional_from(const json& v) {
  if (v.is_null()) return std::nullopt;
  return v.get<double>();
}

}  // namespace

std::string intervention_json(const InterventionDocument& doc) {
  check_intervention(doc, "intervention.json");
  const auto& r = doc.report;
  json j = header("intervention", doc.model_kind);
  j["diagnostic_batch"] = to_json(doc.batch);
  j["testset_size"] = doc.testset_size;
  j["target_group"] = r.target_group;
  j["lr_scale"] = r.lr_scale;
  j["retrain_epochs"] = r.retrain_epochs;
  j["shuffle_seed"] = r.shuffle_seed;
  j["tracked_pair"] = {r.pair_i, r.pair_j};
  j["coupling_before"] = r.coupling_before;
  j["coupling_after"] = optional_number(r.coupling_after);
  j["variability_before"] = optional_number(r.variability_before);
  j["variability_after"] = optional_number(r.variability_after);
  j["reference_perturbation"] = {{"group", r.reference.group}, {"alpha", r.reference.alpha}, {"seed", r.reference.seed}};
  j["complete"] = r.complete;
  j["note"] = r.note;
  return j.dump(2) + "\n";
}

InterventionDocument parse_intervention_json(const std::string& text, const std::string& source) {
  return as_io(source, [&] {
    const json j = detail::parse_json(text, source);
    Fields f(j, "", source);
    check_header(f, "intervention", source);
    InterventionDocument doc;
    doc.model_kind = f.string("model_kind");
    doc.batch = batch_from(f.object("diagnostic_batch"));
    doc.testset_size = static_cast<std::size_t>(f.integer("testset_size"));
    auto& r = doc.report;
    r.target_group = f.string("target_group");
    r.lr_scale = f.number("lr_scale");
    r.retrain_epochs = f.int32("retrain_epochs");
    r.shuffle_seed = f.seed("shuffle_seed");
    const auto pair = f.strings("tracked_pair");
    if (pair.size() != 2) bad(source, "tracked_pair must hold two labels");
    r.pair_i = pair[0];
    r.pair_j = pair[1];
    r.coupling_before = f.number("coupling_before");
    r.coupling_after = optional_from(f.raw("coupling_after"));
    r.variability_before = optional_from(f.raw("variability_before"));
    r.variability_after = optional_from(f.raw("variability_after"));
    Fields ref = f.object("reference_perturbation");
    r.reference.group = ref.string("group");
    r.reference.alpha = ref.number("alpha");
    r.reference.seed = ref.seed("seed");
    ref.finish();
    r.complete = f.boolean("complete");
    r.note = f.string("note");
    f.finish();
    check_intervention(doc, source);
    return doc;
  });
}

// ---- CSV ----

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  for (;;) {
    const auto comma = line.find(',', pos);
    out.push_back(line.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

// Rows of a CSV with an exact expected header.
std::vector<std::vector<std::string>> csv_rows(const std::string& text, const std::string& expected_header,
                                               const std::string& source) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != expected_header) bad(source, "unexpected CSV header");
  const std::size_t width = split(expected_header).size();
  std::vector<std::vector<std::string>> rows;
  int n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != width) bad(source, "line " + std::to_string(n) + " has " + std::to_string(cells.size()) + " fields");
    rows.push_back(std::move(cells));
  }
  return rows;
}

template <class T>
T parse_int(const std::string& s, const std::string& source) {
  T v{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size() || s.empty()) bad(source, "not an integer: '" + s + "'");
  return v;
}

double parse_cell(const std::string& s, const std::string& source) {
  try {
    return parse_double(s);
  } catch (const IoError&) {
    bad(source, "not a number: '" + s + "'");
  }
}

bool safe_name(const std::string& s) { return s.find_first_of(",\n\r\"") == std::string::npos; }

const char* kTrialsHeader =
    "group,alpha,alpha_index,trial_index,trial_seed,loss_base,loss_perturbed,loss_delta,grad_norm_base,"
    "grad_norm_perturbed,variability,diverged";

void check_trials(const std::vector<PerturbationTrial>& trials, const std::string& source) {
  for (const auto& t : trials) {
    if (!safe_name(t.group)) bad(source, "group name not CSV-safe");
    if (t.variability && !(*t.variability >= 0.0 && *t.variability <= 1.0)) bad(source, "variability outside [0, 1]");
    if (t.alpha == 0.0) {
      if (t.loss_perturbed != t.loss_base || t.diverged) bad(source, "alpha 0 trial differs from the baseline");
      if (t.variability && *t.variability != 0.0) bad(source, "alpha 0 trial has nonzero variability");
    }
    if (!t.diverged && !std::isfinite(t.loss_perturbed)) bad(source, "non-finite loss without divergence flag");
  }
}

}  // namespace

std::string trials_csv(const std::vector<PerturbationTrial>& trials) {
  check_trials(trials, "trials.csv");
  std::string out = std::string(kTrialsHeader) + "\n";
  for (const auto& t : trials) {
    out += t.group + "," + format_double(t.alpha) + "," + std::to_string(t.alpha_index) + "," +
           std::to_string(t.trial_index) + "," + std::to_string(t.trial_seed) + "," + format_double(t.loss_base) + "," +
           format_double(t.loss_perturbed) + "," + format_double(t.loss_delta()) + "," +
           format_double(t.grad_norm_base) + "," + format_double(t.grad_norm_perturbed) + "," +
           (t.variability ? format_double(*t.variability) : "") + "," + (t.diverged ? "1" : "0") + "\n";
  }
  return out;
}

std::vector<PerturbationTrial> parse_trials_csv(const std::string& text, const std::string& source) {
  std::vector<PerturbationTrial> out;
  for (const auto& c : csv_rows(text, kTrialsHeader, source)) {
    PerturbationTrial t;
    t.group = c[0];
    t.alpha = parse_cell(c[1], source);
    t.alpha_index = parse_int<int>(c[2], source);
    t.trial_index = parse_int<int>(c[3], source);
    t.trial_seed = parse_int<std::uint64_t>(c[4], source);
    t.loss_base = parse_cell(c[5], source);
    t.loss_perturbed = parse_cell(c[6], source);
    const double delta = parse_cell(c[7], source);
    t.grad_norm_base = parse_cell(c[8], source);
    t.grad_norm_perturbed = parse_cell(c[9], source);
    if (!c[10].empty()) t.variability = parse_cell(c[10], source);
    if (c[11] != "0" && c[11] != "1") bad(source, "diverged must be 0 or 1");
    t.diverged = c[11] == "1";
    const double expect = t.loss_delta();
    if (!(delta == expect || (std::isnan(delta) && std::isnan(expect)))) bad(source, "loss_delta inconsistent");
    out.push_back(std::move(t));
  }
  check_trials(out, source);
  return out;
}

namespace {
const char* kSummaryHeader =
    "group,alpha,trials,diverged,mean_loss_delta,stderr_loss_delta,mean_grad_norm_perturbed,mean_variability";
}

std::string sweep_summary_csv(const std::vector<SweepSummaryRow>& rows) {
  std::string out = std::string(kSummaryHeader) + "\n";
  for (const auto& r : rows) {
    if (!safe_name(r.group)) bad("sweep_summary.csv", "group name not CSV-safe");
    out += r.group + "," + format_double(r.alpha) + "," + std::to_string(r.trials) + "," + std::to_string(r.diverged) +
           "," + format_double(r.mean_loss_delta) + "," + format_double(r.stderr_loss_delta) + "," +
           format_double(r.mean_grad_norm_perturbed) + "," +
           (r.mean_variability ? format_double(*r.mean_variability) : "") + "\n";
  }
  return out;
}

std::vector<SweepSummaryRow> parse_sweep_summary_csv(const std::string& text, const std::string& source) {
  std::vector<SweepSummaryRow> out;
  for (const auto& c : csv_rows(text, kSummaryHeader, source)) {
    SweepSummaryRow r;
    r.group = c[0];
    r.alpha = parse_cell(c[1], source);
    r.trials = parse_int<int>(c[2], source);
    r.diverged = parse_int<int>(c[3], source);
    r.mean_loss_delta = parse_cell(c[4], source);
    r.stderr_loss_delta = parse_cell(c[5], source);
    r.mean_grad_norm_perturbed = parse_cell(c[6], source);
    if (!c[7].empty()) r.mean_variability = parse_cell(c[7], source);
    if (r.trials < 1 || r.diverged < 0 || r.diverged > r.trials) bad(source, "inconsistent trial counts");
    out.push_back(std::move(r));
  }
  return out;
}

std::string train_trace_csv(const TrainingTrace& trace) {
  std::string out = "epoch,loss,accuracy\n";
  for (const auto& e : trace.epochs) {
    out += std::to_string(e.epoch) + "," + format_double(e.loss) + "," + (e.accuracy ? format_double(*e.accuracy) : "") +
           "\n";
  }
  return out;
}

TrainingTrace parse_train_trace_csv(const std::string& text, const std::string& source) {
  TrainingTrace t;
  for (const auto& c : csv_rows(text, "epoch,loss,accuracy", source)) {
    EpochRecord e;
    e.epoch = parse_int<int>(c[0], source);
    e.loss = parse_cell(c[1], source);
    if (!c[2].empty()) e.accuracy = parse_cell(c[2], source);
    t.epochs.push_back(e);
  }
  return t;
}

}  // namespace hessdiag
