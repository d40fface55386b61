#include "hessdiag/perturbation.hpp"

#include <cmath>
#include <limits>

#include "hessdiag/error.hpp"
#include "hessdiag/rng.hpp"

namespace hessdiag {

void validate(const PerturbationSpec& spec) {
  if (spec.alphas.empty()) throw ConfigError("perturbation.alphas must not be empty");
  for (std::size_t i = 0; i < spec.alphas.size(); ++i) {
    const double a = spec.alphas[i];
    if (!std::isfinite(a) || a < 0.0) throw ConfigError("perturbation.alphas must be finite and nonnegative");
    if (i > 0 && !(a > spec.alphas[i - 1])) throw ConfigError("perturbation.alphas must be strictly ascending");
  }
  if (spec.trials_per_alpha < 1) throw ConfigError("perturbation.trials_per_alpha must be at least 1");
}

std::uint64_t trial_seed(std::uint64_t noise_seed, std::size_t alpha_index, std::size_t trial_index) {
  return rng::derive(noise_seed, alpha_index, trial_index);
}

FlatVector perturb(std::span<const double> params, const IndexSet& group, double alpha, std::uint64_t seed) {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("perturb: alpha must be finite and nonnegative");
  FlatVector out(params.begin(), params.end());
  if (alpha == 0.0) return out;
  for (std::size_t k = 0; k < group.size(); ++k) {
    const std::size_t i = group[k];
    if (i >= out.size()) {
      throw DimensionError("perturb: index " + std::to_string(i) + " out of range for dim " +
                           std::to_string(out.size()));
    }
    out[i] += alpha * rng::normal(seed, k);
  }
  return out;
}

namespace {

double disagreement(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.empty()) throw ConfigError("prediction_variability: testset is empty");
  std::size_t diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += a[i] != b[i] ? 1 : 0;
  return static_cast<double>(diff) / static_cast<double>(a.size());
}

std::vector<int> predict_with(const Model& model, std::span<const double> params, Batch batch) {
  return argmax_rows(logits(model.objective, params, batch));
}

struct Evaluation {
  double loss = 0.0;
  double grad_norm = 0.0;
  bool diverged = false;
};

Evaluation evaluate(const Objective& objective, std::span<const double> params, const IndexSet& group,
                    Batch batch) {
  Evaluation e;
  try {
    e.loss = forward(objective, params, batch);
    e.grad_norm = gradient_norm(gradient(objective, params, batch), group);
  } catch (const NonFiniteError&) {
    e.diverged = true;
  }
  if (!std::isfinite(e.loss) || !std::isfinite(e.grad_norm)) e.diverged = true;
  if (e.diverged) {
    e.loss = std::numeric_limits<double>::quiet_NaN();
    e.grad_norm = std::numeric_limits<double>::quiet_NaN();
  }
  return e;
}

std::vector<PerturbationTrial> run_sweep(const Objective& objective, std::span<const double> params,
                                         const IndexSet& group, Batch batch, const PerturbationSpec& spec,
                                         const Model* model, Batch testset) {
  validate(spec);
  const Evaluation base = evaluate(objective, params, group, batch);
  if (base.diverged) throw Error("sweep: baseline loss is not finite");
  std::vector<int> base_pred;
  const bool with_variability = model != nullptr && !testset.empty();
  if (with_variability) base_pred = predict_with(*model, params, testset);

  std::vector<PerturbationTrial> out;
  out.reserve(spec.alphas.size() * static_cast<std::size_t>(spec.trials_per_alpha));
  for (std::size_t a = 0; a < spec.alphas.size(); ++a) {
    for (int t = 0; t < spec.trials_per_alpha; ++t) {
      PerturbationTrial trial;
      trial.group = spec.group;
      trial.alpha = spec.alphas[a];
      trial.alpha_index = static_cast<int>(a);
      trial.trial_index = t;
      trial.trial_seed = trial_seed(spec.noise_seed, a, static_cast<std::size_t>(t));
      trial.loss_base = base.loss;
      trial.grad_norm_base = base.grad_norm;
      if (trial.alpha == 0.0) {
        // the unperturbed point itself: reuse the baseline exactly
        trial.loss_perturbed = base.loss;
        trial.grad_norm_perturbed = base.grad_norm;
        if (with_variability) trial.variability = 0.0;
      } else {
        const FlatVector p = perturb(params, group, trial.alpha, trial.trial_seed);
        const Evaluation e = evaluate(objective, p, group, batch);
        trial.loss_perturbed = e.loss;
        trial.grad_norm_perturbed = e.grad_norm;
        trial.diverged = e.diverged;
        if (with_variability && !e.diverged) {
          try {
            trial.variability = disagreement(base_pred, predict_with(*model, p, testset));
          } catch (const NonFiniteError&) {
            trial.diverged = true;
          }
        }
      }
      out.push_back(std::move(trial));
    }
  }
  return out;
}

}  // namespace

double prediction_variability(const Model& model, std::span<const double> base_params,
                              std::span<const double> perturbed_params, Batch testset) {
  if (base_params.size() != model.params.size() || perturbed_params.size() != model.params.size()) {
    throw DimensionError("prediction_variability: parameter dim does not match the model");
  }
  return disagreement(predict_with(model, base_params, testset), predict_with(model, perturbed_params, testset));
}

double prediction_variability(const Model& base, const Model& perturbed, Batch testset) {
  if (!(base.config == perturbed.config) || !(base.layout() == perturbed.layout())) {
    throw ConfigError("prediction_variability: models do not share a config");
  }
  return disagreement(predict(base, testset), predict(perturbed, testset));
}

std::vector<PerturbationTrial> sweep(const Objective& objective, std::span<const double> params,
                                     const IndexSet& group, Batch batch, const PerturbationSpec& spec) {
  return run_sweep(objective, params, group, batch, spec, nullptr, {});
}

std::vector<PerturbationTrial> sweep(const Model& model, Batch batch, const PerturbationSpec& spec, Batch testset) {
  if (!model.registry.contains(spec.group)) {
    std::string known;
    for (const auto& n : model.registry.names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("perturbation.group '" + spec.group + "' is not a registered group (known: " + known + ")");
  }
  if (!testset.empty() && !model.objective.has_logits()) {
    throw ConfigError("sweep: prediction variability needs a model with logits");
  }
  return run_sweep(model.objective, model.params, model.registry.indices(spec.group), batch, spec, &model, testset);
}

std::vector<SweepSummaryRow> summarize(const std::vector<PerturbationTrial>& trials) {
  std::vector<SweepSummaryRow> rows;
  std::vector<std::vector<double>> deltas;
  std::vector<double> var_sum;
  std::vector<int> var_count;
  for (const auto& t : trials) {
    std::size_t r = 0;
    while (r < rows.size() && !(rows[r].group == t.group && rows[r].alpha == t.alpha)) ++r;
    if (r == rows.size()) {
      rows.push_back({});
      rows.back().group = t.group;
      rows.back().alpha = t.alpha;
      deltas.emplace_back();
      var_sum.push_back(0.0);
      var_count.push_back(0);
    }
    auto& row = rows[r];
    ++row.trials;
    if (t.diverged) {
      ++row.diverged;
      continue;
    }
    deltas[r].push_back(t.loss_delta());
    row.mean_grad_norm_perturbed += t.grad_norm_perturbed;
    if (t.variability) {
      var_sum[r] += *t.variability;
      ++var_count[r];
    }
  }
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto& row = rows[r];
    const auto m = static_cast<double>(deltas[r].size());
    if (m == 0) {
      row.mean_loss_delta = std::numeric_limits<double>::quiet_NaN();
      row.stderr_loss_delta = std::numeric_limits<double>::quiet_NaN();
      row.mean_grad_norm_perturbed = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    double s = 0.0;
    for (double d : deltas[r]) s += d;
    row.mean_loss_delta = s / m;
    if (m > 1) {
      double ss = 0.0;
      for (double d : deltas[r]) ss += (d - row.mean_loss_delta) * (d - row.mean_loss_delta);
      row.stderr_loss_delta = std::sqrt(ss / (m - 1) / m);
    }
    row.mean_grad_norm_perturbed /= m;
    if (var_count[r] > 0) row.mean_variability = var_sum[r] / var_count[r];
  }
  return rows;
}

}  // namespace hessdiag
