#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hessdiag/dataset.hpp"
#include "hessdiag/perturbation.hpp"
#include "hessdiag/spectral.hpp"
#include "hessdiag/trainer.hpp"

namespace hessdiag {

enum class CurvatureLabel { kConvexStable, kConcaveFragile, kDegenerateFlat };

std::string to_string(CurvatureLabel label);
CurvatureLabel parse_curvature_label(const std::string& text);

inline constexpr double kDefaultFlatEps = 1e-6;

// Keyed on the sign of the trace alone: a slightly negative minimum
// eigenvalue does not stop a positive-trace group from counting as convex.
CurvatureLabel classify_curvature(double trace, double eig_min, double eig_max, double flat_eps = kDefaultFlatEps);

enum class EstimatorMode { kStochastic, kDense };
std::string to_string(EstimatorMode mode);
EstimatorMode parse_estimator_mode(const std::string& text);

struct EstimatorConfig {
  EstimatorMode mode = EstimatorMode::kStochastic;
  int probes = kDefaultHutchinsonProbes;
  int lanczos_iters = kDefaultLanczosIters;
  double lanczos_tol = kDefaultLanczosTol;
  std::uint64_t probe_seed = 11;
  // stochastic mode also attaches the dense spectrum when the group is small enough
  bool full_spectrum = true;
  double flat_eps = kDefaultFlatEps;

  friend bool operator==(const EstimatorConfig&, const EstimatorConfig&) = default;
};

void validate(const EstimatorConfig& est);

struct CurvatureVerdict {
  SpectralReport report;
  CurvatureLabel label = CurvatureLabel::kDegenerateFlat;
};

// Per-group seeds depend on the group name, never on evaluation order.
std::uint64_t group_seed(std::uint64_t base, const std::string& group);

SpectralReport spectral_report(HvpEngine& engine, const std::string& group, const IndexSet& indices,
                               const EstimatorConfig& est);

std::vector<CurvatureVerdict> curvature_table(const Model& model, Batch batch, const std::vector<std::string>& groups,
                                              const EstimatorConfig& est);

// Aligned text table: Layer, H.Trace, Extreme Eigenvalues, Interpretation.
std::string format_curvature_table(const std::vector<CurvatureVerdict>& rows);

// "name[i,j]" for a global parameter index.
std::string parameter_label(const ParamLayout& layout, std::size_t index);
// Inverse of parameter_label.
std::size_t parse_parameter_label(const ParamLayout& layout, const std::string& label);

// Heuristic: in each group, the `per_group` coordinates with the largest
// |H_ii| on the batch (ties to the lower index), labeled by parameter name.
std::vector<Selection> heuristic_selection(const Model& model, Batch batch, const std::vector<std::string>& groups,
                                           int per_group);
std::vector<Selection> group_selection(const Model& model, const std::vector<std::string>& groups);
std::vector<Selection> explicit_selection(const Model& model, const std::vector<std::string>& labels);

struct Coupling {
  std::size_t i = 0;
  std::size_t j = 0;
  std::string label_i;
  std::string label_j;
  double raw = 0.0;
  double normalized = 0.0;

  friend bool operator==(const Coupling&, const Coupling&) = default;
};

struct InteractionReport {
  InteractionMatrix matrix;
  // Cross-group pairs (i < j), by |normalized| descending; ties keep (i, j) order.
  std::vector<Coupling> ranked;
  std::string selection_method;
};

InteractionReport interaction_report(const Model& model, Batch batch, const std::vector<Selection>& selection,
                                     CouplingMode mode = CouplingMode::kNormalized,
                                     const std::string& selection_method = "explicit");
std::vector<Coupling> rank_couplings(const InteractionMatrix& m);

struct ReferencePerturbation {
  std::string group;  // empty: the intervention target
  double alpha = 0.1;
  std::uint64_t seed = 17;
};

struct InterventionConfig {
  std::string target_group;
  double lr_scale = 0.1;
  OptimizerConfig retrain;  // retrain.epochs is the retraining length
  ReferencePerturbation reference;
  // Pair to track, as selection labels; empty means the top pre-intervention coupling.
  std::optional<std::pair<std::string, std::string>> tracked_pair;
};

struct InterventionReport {
  std::string target_group;
  double lr_scale = 1.0;
  int retrain_epochs = 0;
  std::string pair_i;
  std::string pair_j;
  double coupling_before = 0.0;
  std::optional<double> coupling_after;
  std::optional<double> variability_before;
  std::optional<double> variability_after;
  ReferencePerturbation reference;
  std::uint64_t shuffle_seed = 0;
  bool complete = true;
  std::string note;
  FlatVector retrained_params;
};

// `model` is the trained baseline and is not modified; retraining runs on a
// copy continuing from its parameters. A divergence yields complete == false
// with only the before-fields set.
InterventionReport run_intervention(const Model& model, const Dataset& data, const std::vector<Selection>& selection,
                                    Batch diagnostic_batch, Batch testset, const InterventionConfig& config);

}  // namespace hessdiag
