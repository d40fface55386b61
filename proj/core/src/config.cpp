#include "hessdiag/config.hpp"

#include <fstream>
#include <sstream>

#include "json_util.hpp"

namespace hessdiag {

using detail::Fields;
using detail::json;

std::string to_string(SelectionMethod method) {
  switch (method) {
    case SelectionMethod::kHeuristic: return "heuristic";
    case SelectionMethod::kExplicit: return "explicit";
    case SelectionMethod::kGroups: return "groups";
  }
  return "unknown";
}

namespace {

SelectionMethod parse_selection_method(const std::string& s, const std::string& source) {
  if (s == "heuristic") return SelectionMethod::kHeuristic;
  if (s == "explicit") return SelectionMethod::kExplicit;
  if (s == "groups") return SelectionMethod::kGroups;
  throw ConfigError(source + ": field 'selection.method' must be heuristic, explicit or groups");
}

CouplingMode parse_coupling_mode(const std::string& s, const std::string& source) {
  if (s == "normalized") return CouplingMode::kNormalized;
  if (s == "raw") return CouplingMode::kRaw;
  throw ConfigError(source + ": field 'selection.mode' must be raw or normalized");
}

}  // namespace

RunConfig default_run_config(ModelKind kind) {
  RunConfig c;
  c.model.kind = kind;
  c.model.vocab_size = 24;
  c.model.embed_dim = 8;
  c.model.classes = 4;
  c.model.seq_len = 6;
  c.model.sents_per_doc = 3;
  c.model.words_per_sent = 5;
  c.train.learning_rate = 0.3;
  c.train.batch_size = 8;
  switch (kind) {
    case ModelKind::kHierarchical:
      c.model.heads = 1;
      c.train.epochs = 120;
      break;
    case ModelKind::kSelfAttention:
    case ModelKind::kCrossAttention:
      c.model.heads = 2;
      c.train.epochs = 40;
      break;
    case ModelKind::kEngineered:
      throw ConfigError("engineered models have no run configuration");
  }
  c.output_dir = "hessdiag_out/" + to_string(kind);
  return c;
}

RunConfig parse_run_config(const std::string& text, const std::string& source) {
  const json root = detail::parse_json(text, source);
  Fields top(root, "", source);
  if (top.has("schema_version")) {
    if (top.integer("schema_version") != kConfigSchemaVersion) {
      top.fail("field 'schema_version' must be " + std::to_string(kConfigSchemaVersion));
    }
  }

  Fields m = top.object("model");
  ModelKind kind;
  try {
    kind = parse_model_kind(m.string("kind"));
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": field 'model.kind': " + e.what());
  }
  if (kind == ModelKind::kEngineered) m.fail("field 'model.kind' must be hierarchical, selfattn or crossattn");
  RunConfig c = default_run_config(kind);
  c.model.classes = m.int32("classes");
  if (m.has("vocab_size")) c.model.vocab_size = m.int32("vocab_size");
  if (m.has("embed_dim")) c.model.embed_dim = m.int32("embed_dim");
  if (m.has("heads")) c.model.heads = m.int32("heads");
  if (m.has("seq_len")) c.model.seq_len = m.int32("seq_len");
  if (m.has("sents_per_doc")) c.model.sents_per_doc = m.int32("sents_per_doc");
  if (m.has("words_per_sent")) c.model.words_per_sent = m.int32("words_per_sent");
  if (m.has("init_seed")) m.fail("field 'model.init_seed' is set through 'seeds.init'");
  m.finish();

  if (top.has("data")) {
    Fields d = top.object("data");
    if (d.has("train_size")) c.data.train_size = d.int32("train_size");
    if (d.has("test_size")) c.data.test_size = d.int32("test_size");
    if (d.has("signal_tokens")) c.data.signal_tokens = d.int32("signal_tokens");
    if (d.has("distractor_tokens")) c.data.distractor_tokens = d.int32("distractor_tokens");
    d.finish();
  }
  if (top.has("train")) {
    Fields t = top.object("train");
    if (t.has("epochs")) c.train.epochs = t.int32("epochs");
    if (t.has("batch_size")) c.train.batch_size = t.int32("batch_size");
    if (t.has("learning_rate")) c.train.learning_rate = t.number("learning_rate");
    if (t.has("group_lr_scale")) {
      Fields g = t.object("group_lr_scale");
      for (auto it = g.value().begin(); it != g.value().end(); ++it) c.train.group_lr_scale[it.key()] = g.number(it.key());
      g.finish();
    }
    t.finish();
  }
  if (top.has("estimators")) {
    Fields e = top.object("estimators");
    auto& est = c.estimators.estimator;
    if (e.has("mode")) {
      try {
        est.mode = parse_estimator_mode(e.string("mode"));
      } catch (const ConfigError& err) {
        throw ConfigError(source + ": field 'estimators.mode': " + err.what());
      }
    }
    if (e.has("probes")) est.probes = e.int32("probes");
    if (e.has("lanczos_iters")) est.lanczos_iters = e.int32("lanczos_iters");
    if (e.has("lanczos_tol")) est.lanczos_tol = e.number("lanczos_tol");
    if (e.has("full_spectrum")) est.full_spectrum = e.boolean("full_spectrum");
    if (e.has("flat_eps")) est.flat_eps = e.number("flat_eps");
    if (e.has("diagnostic_batch_size")) c.estimators.diagnostic_batch_size = e.int32("diagnostic_batch_size");
    if (e.has("groups")) c.estimators.groups = e.strings("groups");
    e.finish();
  }
  if (top.has("perturbation")) {
    const json& arr = top.raw("perturbation");
    if (!arr.is_array()) top.fail("field 'perturbation' must be an array of sweep objects");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      Fields p(arr[i], "perturbation[" + std::to_string(i) + "]", source);
      PerturbationSettings s;
      s.group = p.string("group");
      if (p.has("alphas")) s.alphas = p.numbers("alphas");
      if (p.has("trials_per_alpha")) s.trials_per_alpha = p.int32("trials_per_alpha");
      p.finish();
      c.perturbation.push_back(std::move(s));
    }
  }
  if (top.has("selection")) {
    Fields s = top.object("selection");
    if (s.has("method")) c.selection.method = parse_selection_method(s.string("method"), source);
    if (s.has("groups")) c.selection.groups = s.strings("groups");
    if (s.has("per_group")) c.selection.per_group = s.int32("per_group");
    if (s.has("labels")) c.selection.labels = s.strings("labels");
    if (s.has("mode")) c.selection.mode = parse_coupling_mode(s.string("mode"), source);
    s.finish();
  }
  if (top.has("intervention")) {
    Fields v = top.object("intervention");
    if (v.has("target_group")) c.intervention.target_group = v.string("target_group");
    if (v.has("lr_scale")) c.intervention.lr_scale = v.number("lr_scale");
    if (v.has("retrain_epochs")) c.intervention.retrain_epochs = v.int32("retrain_epochs");
    if (v.has("reference_group")) c.intervention.reference_group = v.string("reference_group");
    if (v.has("reference_alpha")) c.intervention.reference_alpha = v.number("reference_alpha");
    if (v.has("tracked_pair")) {
      const auto pair = v.strings("tracked_pair");
      if (pair.size() != 2) v.fail("field 'intervention.tracked_pair' must hold exactly two labels");
      c.intervention.tracked_pair = std::make_pair(pair[0], pair[1]);
    }
    v.finish();
  }
  if (top.has("seeds")) {
    Fields s = top.object("seeds");
    if (s.has("init")) c.seeds.init = s.seed("init");
    if (s.has("data")) c.seeds.data = s.seed("data");
    if (s.has("shuffle")) c.seeds.shuffle = s.seed("shuffle");
    if (s.has("noise")) c.seeds.noise = s.seed("noise");
    if (s.has("probe")) c.seeds.probe = s.seed("probe");
    if (s.has("diagnostic")) c.seeds.diagnostic = s.seed("diagnostic");
    if (s.has("reference")) c.seeds.reference = s.seed("reference");
    s.finish();
  }
  if (top.has("output_dir")) c.output_dir = top.string("output_dir");
  top.finish();

  c.model.init_seed = c.seeds.init;
  c.train.shuffle_seed = c.seeds.shuffle;
  c.estimators.estimator.probe_seed = c.seeds.probe;
  try {
    validate(c);
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.string());
}

std::string dump_run_config(const RunConfig& c) {
  json j;
  j["schema_version"] = kConfigSchemaVersion;
  json model = detail::to_json(c.model);
  model.erase("init_seed");
  j["model"] = model;
  j["data"] = {{"train_size", c.data.train_size},
               {"test_size", c.data.test_size},
               {"signal_tokens", c.data.signal_tokens},
               {"distractor_tokens", c.data.distractor_tokens}};
  json scales = json::object();
  for (const auto& [g, s] : c.train.group_lr_scale) scales[g] = s;
  j["train"] = {{"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"learning_rate", c.train.learning_rate},
                {"group_lr_scale", scales}};
  const auto& est = c.estimators.estimator;
  j["estimators"] = {{"mode", to_string(est.mode)},
                     {"probes", est.probes},
                     {"lanczos_iters", est.lanczos_iters},
                     {"lanczos_tol", est.lanczos_tol},
                     {"full_spectrum", est.full_spectrum},
                     {"flat_eps", est.flat_eps},
                     {"diagnostic_batch_size", c.estimators.diagnostic_batch_size},
                     {"groups", c.estimators.groups}};
  json sweeps = json::array();
  for (const auto& p : c.perturbation) {
    sweeps.push_back({{"group", p.group}, {"alphas", p.alphas}, {"trials_per_alpha", p.trials_per_alpha}});
  }
  j["perturbation"] = sweeps;
  j["selection"] = {{"method", to_string(c.selection.method)},
                    {"groups", c.selection.groups},
                    {"per_group", c.selection.per_group},
                    {"labels", c.selection.labels},
                    {"mode", c.selection.mode == CouplingMode::kRaw ? "raw" : "normalized"}};
  json iv = {{"target_group", c.intervention.target_group},
             {"lr_scale", c.intervention.lr_scale},
             {"retrain_epochs", c.intervention.retrain_epochs},
             {"reference_group", c.intervention.reference_group},
             {"reference_alpha", c.intervention.reference_alpha}};
  if (c.intervention.tracked_pair) {
    iv["tracked_pair"] = {c.intervention.tracked_pair->first, c.intervention.tracked_pair->second};
  }
  j["intervention"] = iv;
  j["seeds"] = {{"init", c.seeds.init},         {"data", c.seeds.data},         {"shuffle", c.seeds.shuffle},
                {"noise", c.seeds.noise},       {"probe", c.seeds.probe},       {"diagnostic", c.seeds.diagnostic},
                {"reference", c.seeds.reference}};
  j["output_dir"] = c.output_dir;
  return j.dump(2) + "\n";
}

void validate(const RunConfig& c) {
  validate(c.model);
  validate(data_spec(c));
  if (c.train.epochs < 0) throw ConfigError("field 'train.epochs' must be nonnegative");
  if (c.train.batch_size <= 0) throw ConfigError("field 'train.batch_size' must be positive");
  if (!(c.train.learning_rate >= 0.0) || !std::isfinite(c.train.learning_rate)) {
    throw ConfigError("field 'train.learning_rate' must be finite and nonnegative");
  }
  try {
    validate(c.estimators.estimator);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("field ") + e.what());
  }
  if (c.estimators.diagnostic_batch_size <= 0) {
    throw ConfigError("field 'estimators.diagnostic_batch_size' must be positive");
  }
  for (const auto& p : c.perturbation) {
    PerturbationSpec spec{p.group, p.alphas, p.trials_per_alpha, 0};
    validate(spec);
  }
  if (c.selection.per_group < 1) throw ConfigError("field 'selection.per_group' must be at least 1");
  if (c.selection.method == SelectionMethod::kExplicit && c.selection.labels.size() < 2) {
    throw ConfigError("field 'selection.labels' needs at least two entries for explicit selection");
  }
  if (!(c.intervention.lr_scale > 0.0 && c.intervention.lr_scale <= 1.0)) {
    throw ConfigError("field 'intervention.lr_scale' must lie in (0, 1]");
  }
  if (c.intervention.retrain_epochs < 0) throw ConfigError("field 'intervention.retrain_epochs' must be nonnegative");
  if (!(c.intervention.reference_alpha >= 0.0)) {
    throw ConfigError("field 'intervention.reference_alpha' must be nonnegative");
  }
  if (c.output_dir.empty()) throw ConfigError("field 'output_dir' must not be empty");
}

DataSpec data_spec(const RunConfig& c) {
  return data_spec_for(c.model, c.data.train_size, c.data.test_size, c.data.signal_tokens, c.data.distractor_tokens);
}

OptimizerConfig optimizer(const RunConfig& c) {
  OptimizerConfig o = c.train;
  o.shuffle_seed = c.seeds.shuffle;
  return o;
}

EstimatorConfig estimator(const RunConfig& c) {
  EstimatorConfig e = c.estimators.estimator;
  e.probe_seed = c.seeds.probe;
  return e;
}

std::vector<PerturbationSpec> perturbation_specs(const RunConfig& c, const GroupRegistry& registry) {
  std::vector<PerturbationSettings> settings = c.perturbation;
  if (settings.empty()) {
    for (const auto& g : registry.names()) settings.push_back(PerturbationSettings{g, kDefaultAlphas, 8});
  }
  std::vector<PerturbationSpec> out;
  for (const auto& s : settings) {
    // one noise stream per group name, so adding a sweep never shifts another's seeds
    out.push_back(PerturbationSpec{s.group, s.alphas, s.trials_per_alpha, group_seed(c.seeds.noise, s.group)});
  }
  return out;
}

InterventionConfig intervention(const RunConfig& c, const GroupRegistry& registry) {
  InterventionConfig v;
  v.target_group = c.intervention.target_group;
  if (v.target_group.empty()) {
    if (registry.groups().empty()) throw ConfigError("intervention: model has no attention groups");
    v.target_group = registry.groups().front().first;
  }
  v.lr_scale = c.intervention.lr_scale;
  v.retrain = optimizer(c);
  v.retrain.epochs = c.intervention.retrain_epochs;
  v.reference.group = c.intervention.reference_group;
  v.reference.alpha = c.intervention.reference_alpha;
  v.reference.seed = c.seeds.reference;
  v.tracked_pair = c.intervention.tracked_pair;
  return v;
}

}  // namespace hessdiag
