#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hessdiag/models.hpp"

namespace hessdiag {

inline const std::vector<double> kDefaultAlphas = {0.0, 0.001, 0.01, 0.05, 0.1, 0.5};

struct PerturbationSpec {
  std::string group;
  std::vector<double> alphas = kDefaultAlphas;
  int trials_per_alpha = 8;
  std::uint64_t noise_seed = 5;

  friend bool operator==(const PerturbationSpec&, const PerturbationSpec&) = default;
};

void validate(const PerturbationSpec& spec);

struct PerturbationTrial {
  std::string group;
  double alpha = 0.0;
  int alpha_index = 0;
  int trial_index = 0;
  std::uint64_t trial_seed = 0;
  double loss_base = 0.0;
  double loss_perturbed = 0.0;
  double grad_norm_base = 0.0;
  double grad_norm_perturbed = 0.0;
  std::optional<double> variability;
  bool diverged = false;

  double loss_delta() const { return loss_perturbed - loss_base; }
  friend bool operator==(const PerturbationTrial&, const PerturbationTrial&) = default;
};

std::uint64_t trial_seed(std::uint64_t noise_seed, std::size_t alpha_index, std::size_t trial_index);

// theta + alpha * delta with delta ~ N(0, I) on `group` (drawn from `seed`,
// coordinate k of the group uses counter k) and zero elsewhere.
FlatVector perturb(std::span<const double> params, const IndexSet& group, double alpha, std::uint64_t seed);

// Fraction of `testset` whose predicted label differs between the two
// parameter vectors of one model.
double prediction_variability(const Model& model, std::span<const double> base_params,
                              std::span<const double> perturbed_params, Batch testset);
// Two separate models; configs and layouts must match.
double prediction_variability(const Model& base, const Model& perturbed, Batch testset);

// Objective-level sweep: no predictions, so variability stays empty.
std::vector<PerturbationTrial> sweep(const Objective& objective, std::span<const double> params,
                                     const IndexSet& group, Batch batch, const PerturbationSpec& spec);

// Full sweep on a model. Variability is filled when `testset` is non-empty.
std::vector<PerturbationTrial> sweep(const Model& model, Batch batch, const PerturbationSpec& spec,
                                     Batch testset = {});

struct SweepSummaryRow {
  std::string group;
  double alpha = 0.0;
  int trials = 0;
  int diverged = 0;
  double mean_loss_delta = 0.0;
  double stderr_loss_delta = 0.0;
  double mean_grad_norm_perturbed = 0.0;
  std::optional<double> mean_variability;
};

// One row per (group, alpha) in input order; diverged trials are counted
// but excluded from the means.
std::vector<SweepSummaryRow> summarize(const std::vector<PerturbationTrial>& trials);

}  // namespace hessdiag
