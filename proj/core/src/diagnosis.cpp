#include "hessdiag/diagnosis.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "hessdiag/error.hpp"
#include "hessdiag/rng.hpp"

namespace hessdiag {

std::string to_string(CurvatureLabel label) {
  switch (label) {
    case CurvatureLabel::kConvexStable: return "convex-stable";
    case CurvatureLabel::kConcaveFragile: return "concave-fragile";
    case CurvatureLabel::kDegenerateFlat: return "degenerate-flat";
  }
  return "unknown";
}

CurvatureLabel parse_curvature_label(const std::string& text) {
  if (text == "convex-stable") return CurvatureLabel::kConvexStable;
  if (text == "concave-fragile") return CurvatureLabel::kConcaveFragile;
  if (text == "degenerate-flat") return CurvatureLabel::kDegenerateFlat;
  throw ConfigError("unknown curvature label '" + text + "'");
}

CurvatureLabel classify_curvature(double trace, double /*eig_min*/, double /*eig_max*/, double flat_eps) {
  if (std::abs(trace) <= flat_eps) return CurvatureLabel::kDegenerateFlat;
  return trace < 0.0 ? CurvatureLabel::kConcaveFragile : CurvatureLabel::kConvexStable;
}

std::string to_string(EstimatorMode mode) { return mode == EstimatorMode::kDense ? "dense" : "stochastic"; }

EstimatorMode parse_estimator_mode(const std::string& text) {
  if (text == "dense") return EstimatorMode::kDense;
  if (text == "stochastic") return EstimatorMode::kStochastic;
  throw ConfigError("estimators.mode must be 'stochastic' or 'dense', got '" + text + "'");
}

void validate(const EstimatorConfig& est) {
  if (est.probes < 1) throw ConfigError("estimators.probes must be at least 1");
  if (est.lanczos_iters < 2) throw ConfigError("estimators.lanczos_iters must be at least 2");
  if (!(est.lanczos_tol > 0.0)) throw ConfigError("estimators.lanczos_tol must be positive");
  if (!(est.flat_eps >= 0.0)) throw ConfigError("estimators.flat_eps must be nonnegative");
}

std::uint64_t group_seed(std::uint64_t base, const std::string& group) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char ch : group) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return rng::derive(base, h);
}

SpectralReport spectral_report(HvpEngine& engine, const std::string& group, const IndexSet& indices,
                               const EstimatorConfig& est) {
  validate(est);
  const HvpClosure op = group_restricted_hvp(engine, indices);
  SpectralReport r;
  r.group = group;
  r.dim = indices.size();
  r.mode = to_string(est.mode);
  r.probe_seed = group_seed(est.probe_seed, group);
  r.lanczos_seed = rng::derive(r.probe_seed, 0x4c);

  const bool dense_fits = r.dim <= kDenseDimLimit;
  if (est.mode == EstimatorMode::kDense || r.dim < 2) {
    if (!dense_fits) throw DimensionError("dense estimator: group dim " + std::to_string(r.dim) + " exceeds limit");
    const DenseHessian h = dense_hessian(op);
    auto spectrum = exact_spectrum(h.matrix);
    r.trace = h.matrix.trace();
    r.trace_stderr = 0.0;
    r.eig_min = spectrum.front();
    r.eig_max = spectrum.back();
    r.probes_used = static_cast<int>(r.dim);  // one unit-vector product per column
    r.lanczos_iters = 0;
    r.lanczos_converged = true;
    r.mode = "dense";
    r.spectrum = std::move(spectrum);
    return r;
  }
  const TraceEstimate t = hutchinson_trace(op, est.probes, r.probe_seed);
  r.trace = t.trace;
  r.trace_stderr = t.standard_error;
  r.probes_used = t.probes;
  const LanczosResult l = lanczos_extreme(op, est.lanczos_iters, est.lanczos_tol, r.lanczos_seed);
  r.eig_min = l.eig_min;
  r.eig_max = l.eig_max;
  r.lanczos_iters = l.iterations;
  r.lanczos_converged = l.converged;
  if (est.full_spectrum && dense_fits) r.spectrum = exact_spectrum(dense_hessian(op).matrix);
  return r;
}

namespace {

std::string known_groups(const GroupRegistry& reg) {
  std::string out;
  for (const auto& n : reg.names()) out += (out.empty() ? "" : ", ") + n;
  return out;
}

void require_group(const Model& model, const std::string& group, const char* what) {
  if (!model.registry.contains(group)) {
    throw ConfigError(std::string(what) + ": unknown group '" + group + "' (known: " + known_groups(model.registry) +
                      ")");
  }
}

}  // namespace

std::vector<CurvatureVerdict> curvature_table(const Model& model, Batch batch, const std::vector<std::string>& groups,
                                              const EstimatorConfig& est) {
  validate(est);
  for (const auto& g : groups) require_group(model, g, "curvature_table");
  HvpEngine engine(model.objective, model.params, batch);
  std::vector<CurvatureVerdict> rows;
  for (const auto& g : groups) {
    CurvatureVerdict v;
    try {
      v.report = spectral_report(engine, g, model.registry.indices(g), est);
    } catch (const NonFiniteError&) {
      throw;
    } catch (const Error& e) {
      throw Error("curvature of group '" + g + "': " + e.what());
    }
    v.label = classify_curvature(v.report.trace, v.report.eig_min, v.report.eig_max, est.flat_eps);
    rows.push_back(std::move(v));
  }
  return rows;
}

namespace {

std::string fmt(double x, const char* spec = "%.4g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, x);
  return buf;
}

}  // namespace

std::string format_curvature_table(const std::vector<CurvatureVerdict>& rows) {
  std::vector<std::array<std::string, 4>> cells;
  cells.push_back({"Layer", "H.Trace", "Extreme Eigenvalues", "Interpretation"});
  for (const auto& r : rows) {
    cells.push_back({r.report.group, fmt(r.report.trace),
                     "(" + fmt(r.report.eig_min) + ", " + fmt(r.report.eig_max) + ")", to_string(r.label)});
  }
  std::array<std::size_t, 4> width{};
  for (const auto& row : cells)
    for (std::size_t c = 0; c < 4; ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream out;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t c = 0; c < 4; ++c) {
      out << cells[r][c];
      if (c + 1 < 4) out << std::string(width[c] - cells[r][c].size() + 2, ' ');
    }
    out << '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (std::size_t c = 0; c < 4; ++c) total += width[c] + (c + 1 < 4 ? 2 : 0);
      out << std::string(total, '-') << '\n';
    }
  }
  return out.str();
}

std::string parameter_label(const ParamLayout& layout, std::size_t index) {
  for (const auto& e : layout.entries()) {
    if (index < e.offset || index >= e.offset + e.size) continue;
    std::size_t rem = index - e.offset;
    std::vector<std::size_t> coord(e.shape.size());
    for (std::size_t d = e.shape.size(); d-- > 0;) {
      coord[d] = rem % e.shape[d];
      rem /= e.shape[d];
    }
    std::string out = e.name + "[";
    for (std::size_t d = 0; d < coord.size(); ++d) out += (d ? "," : "") + std::to_string(coord[d]);
    return out + "]";
  }
  throw DimensionError("parameter index " + std::to_string(index) + " out of range");
}

std::size_t parse_parameter_label(const ParamLayout& layout, const std::string& label) {
  const auto open = label.find('[');
  if (open == std::string::npos || label.back() != ']') {
    throw ConfigError("malformed parameter label '" + label + "' (expected name[i,j])");
  }
  const std::string name = label.substr(0, open);
  const ParamTensorInfo* entry = nullptr;
  for (const auto& e : layout.entries())
    if (e.name == name) entry = &e;
  if (entry == nullptr) throw ConfigError("unknown parameter tensor '" + name + "' in label '" + label + "'");
  std::vector<std::size_t> coord;
  const std::string body = label.substr(open + 1, label.size() - open - 2);
  std::size_t pos = 0;
  while (pos <= body.size()) {
    const auto comma = std::min(body.find(',', pos), body.size());
    std::size_t v = 0;
    const auto* first = body.data() + pos;
    const auto* last = body.data() + comma;
    const auto res = std::from_chars(first, last, v);
    if (res.ec != std::errc{} || res.ptr != last || first == last) {
      throw ConfigError("malformed index in parameter label '" + label + "'");
    }
    coord.push_back(v);
    pos = comma + 1;
  }
  if (coord.size() != entry->shape.size()) throw ConfigError("parameter label '" + label + "' has the wrong rank");
  std::size_t flat = 0;
  for (std::size_t d = 0; d < coord.size(); ++d) {
    if (coord[d] >= entry->shape[d]) throw ConfigError("parameter label '" + label + "' is out of range");
    flat = flat * entry->shape[d] + coord[d];
  }
  return entry->offset + flat;
}

std::vector<Selection> heuristic_selection(const Model& model, Batch batch, const std::vector<std::string>& groups,
                                           int per_group) {
  if (per_group < 1) throw ConfigError("selection.per_group must be at least 1");
  for (const auto& g : groups) require_group(model, g, "selection");
  HvpEngine engine(model.objective, model.params, batch);
  std::vector<Selection> out;
  for (const auto& g : groups) {
    const IndexSet& idx = model.registry.indices(g);
    const HvpClosure op = group_restricted_hvp(engine, idx);
    std::vector<double> diag(idx.size());
    FlatVector e(idx.size(), 0.0);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      e[k] = 1.0;
      diag[k] = std::abs(op(e)[k]);
      e[k] = 0.0;
    }
    std::vector<std::size_t> order(idx.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return diag[a] > diag[b]; });
    const auto take = std::min<std::size_t>(order.size(), static_cast<std::size_t>(per_group));
    for (std::size_t k = 0; k < take; ++k) {
      const std::size_t gi = idx[order[k]];
      out.push_back(Selection{parameter_label(model.layout(), gi), g, {gi}});
    }
  }
  return out;
}

std::vector<Selection> group_selection(const Model& model, const std::vector<std::string>& groups) {
  std::vector<Selection> out;
  for (const auto& g : groups) {
    require_group(model, g, "selection");
    out.push_back(Selection{g, g, model.registry.indices(g)});
  }
  return out;
}

std::vector<Selection> explicit_selection(const Model& model, const std::vector<std::string>& labels) {
  std::vector<Selection> out;
  for (const auto& label : labels) {
    if (model.registry.contains(label)) {
      out.push_back(Selection{label, label, model.registry.indices(label)});
      continue;
    }
    if (label.find('[') == std::string::npos) {
      throw ConfigError("selection: '" + label + "' is neither a group (known: " + known_groups(model.registry) +
                        ") nor a parameter label name[i,j]");
    }
    const std::size_t gi = parse_parameter_label(model.layout(), label);
    out.push_back(Selection{label, model.registry.group_of(gi), {gi}});
  }
  return out;
}

std::vector<Coupling> rank_couplings(const InteractionMatrix& m) {
  std::vector<Coupling> out;
  const std::size_t k = m.labels.size();
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i + 1; j < k; ++j) {
      if (m.groups[i] == m.groups[j]) continue;
      out.push_back(Coupling{i, j, m.labels[i], m.labels[j], m.raw(i, j), m.normalized(i, j)});
    }
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Coupling& a, const Coupling& b) { return std::abs(a.normalized) > std::abs(b.normalized); });
  return out;
}

InteractionReport interaction_report(const Model& model, Batch batch, const std::vector<Selection>& selection,
                                     CouplingMode mode, const std::string& selection_method) {
  InteractionReport r;
  r.matrix = interaction_matrix(model.objective, model.params, batch, selection, mode);
  r.ranked = rank_couplings(r.matrix);
  r.selection_method = selection_method;
  return r;
}

InterventionReport run_intervention(const Model& model, const Dataset& data, const std::vector<Selection>& selection,
                                    Batch diagnostic_batch, Batch testset, const InterventionConfig& config) {
  if (!(config.lr_scale > 0.0 && config.lr_scale <= 1.0)) {
    throw ConfigError("intervention.lr_scale must lie in (0, 1]");
  }
  require_group(model, config.target_group, "intervention.target_group");
  ReferencePerturbation ref = config.reference;
  if (ref.group.empty()) ref.group = config.target_group;
  require_group(model, ref.group, "intervention.reference.group");

  InterventionReport out;
  out.target_group = config.target_group;
  out.lr_scale = config.lr_scale;
  out.retrain_epochs = config.retrain.epochs;
  out.reference = ref;
  out.shuffle_seed = config.retrain.shuffle_seed;

  const InteractionReport before = interaction_report(model, diagnostic_batch, selection);
  std::size_t pi = 0, pj = 0;
  if (config.tracked_pair) {
    auto find = [&](const std::string& label) {
      for (std::size_t k = 0; k < before.matrix.labels.size(); ++k)
        if (before.matrix.labels[k] == label) return k;
      throw ConfigError("intervention.tracked_pair: '" + label + "' is not in the selection");
    };
    pi = find(config.tracked_pair->first);
    pj = find(config.tracked_pair->second);
    if (pi == pj) throw ConfigError("intervention.tracked_pair must name two different selections");
  } else {
    if (before.ranked.empty()) throw ConfigError("intervention: selection has no cross-group pair to track");
    pi = before.ranked.front().i;
    pj = before.ranked.front().j;
  }
  out.pair_i = before.matrix.labels[pi];
  out.pair_j = before.matrix.labels[pj];
  out.coupling_before = before.matrix.normalized(pi, pj);

  const bool with_variability = model.objective.has_logits() && !testset.empty();
  const IndexSet& ref_idx = model.registry.indices(ref.group);
  auto variability = [&](const FlatVector& params) {
    return prediction_variability(model, params, perturb(params, ref_idx, ref.alpha, ref.seed), testset);
  };
  if (with_variability) out.variability_before = variability(model.params);

  Model retrained = model;
  OptimizerConfig opt = config.retrain;
  const auto it = opt.group_lr_scale.find(config.target_group);
  opt.group_lr_scale[config.target_group] = (it == opt.group_lr_scale.end() ? 1.0 : it->second) * config.lr_scale;
  try {
    train(retrained, data, opt);
  } catch (const DivergenceError& e) {
    out.complete = false;
    out.note = e.what();
    return out;
  }
  const InteractionReport after = interaction_report(retrained, diagnostic_batch, selection);
  out.coupling_after = after.matrix.normalized(pi, pj);
  if (with_variability) {
    out.variability_after = prediction_variability(retrained, retrained.params,
                                                   perturb(retrained.params, ref_idx, ref.alpha, ref.seed), testset);
  }
  out.retrained_params = std::move(retrained.params);
  return out;
}

}  // namespace hessdiag
