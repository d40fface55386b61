#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hessdiag/dataset.hpp"
#include "hessdiag/diagnosis.hpp"
#include "hessdiag/models.hpp"
#include "hessdiag/perturbation.hpp"
#include "hessdiag/trainer.hpp"

namespace hessdiag {

inline constexpr int kConfigSchemaVersion = 1;

struct Seeds {
  std::uint64_t init = 1;
  std::uint64_t data = 7;
  std::uint64_t shuffle = 3;
  std::uint64_t noise = 5;
  std::uint64_t probe = 11;
  std::uint64_t diagnostic = 13;
  std::uint64_t reference = 17;

  friend bool operator==(const Seeds&, const Seeds&) = default;
};

struct DataSettings {
  int train_size = 256;
  int test_size = 64;
  int signal_tokens = 2;
  int distractor_tokens = 1;

  friend bool operator==(const DataSettings&, const DataSettings&) = default;
};

struct EstimatorSettings {
  EstimatorConfig estimator;          // probe_seed comes from seeds.probe
  int diagnostic_batch_size = 64;
  std::vector<std::string> groups;    // empty: every registry group

  friend bool operator==(const EstimatorSettings&, const EstimatorSettings&) = default;
};

struct PerturbationSettings {
  std::string group;
  std::vector<double> alphas = kDefaultAlphas;
  int trials_per_alpha = 8;

  friend bool operator==(const PerturbationSettings&, const PerturbationSettings&) = default;
};

enum class SelectionMethod { kHeuristic, kExplicit, kGroups };
std::string to_string(SelectionMethod method);

struct SelectionSettings {
  SelectionMethod method = SelectionMethod::kHeuristic;
  std::vector<std::string> groups;    // heuristic / groups; empty: every registry group
  int per_group = 2;                  // heuristic
  std::vector<std::string> labels;    // explicit: group names or name[i,j]
  CouplingMode mode = CouplingMode::kNormalized;

  friend bool operator==(const SelectionSettings&, const SelectionSettings&) = default;
};

struct InterventionSettings {
  std::string target_group;           // empty: first registry group
  double lr_scale = 0.1;
  int retrain_epochs = 10;
  std::string reference_group;        // empty: target group
  double reference_alpha = 0.1;
  std::optional<std::pair<std::string, std::string>> tracked_pair;

  friend bool operator==(const InterventionSettings&, const InterventionSettings&) = default;
};

struct RunConfig {
  ModelConfig model;
  DataSettings data;
  OptimizerConfig train;              // shuffle_seed comes from seeds.shuffle
  EstimatorSettings estimators;
  std::vector<PerturbationSettings> perturbation;  // empty: one sweep per registry group
  SelectionSettings selection;
  InterventionSettings intervention;
  Seeds seeds;
  std::string output_dir = "hessdiag_out";

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

// Reference configuration for a model kind.
RunConfig default_run_config(ModelKind kind);

// JSON text -> config. Errors are ConfigError naming the line (syntax) or the
// dotted field path (content). model.kind and model.classes are required;
// everything else falls back to default_run_config(kind). Unknown keys are
// rejected.
RunConfig parse_run_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);

// Canonical JSON with every field resolved; parse_run_config round-trips it.
std::string dump_run_config(const RunConfig& config);

// Cross-field checks that need no model (ranges, seeds, divisibility).
void validate(const RunConfig& config);

// Derived settings that the library functions take.
DataSpec data_spec(const RunConfig& config);
OptimizerConfig optimizer(const RunConfig& config);
EstimatorConfig estimator(const RunConfig& config);
std::vector<PerturbationSpec> perturbation_specs(const RunConfig& config, const GroupRegistry& registry);
InterventionConfig intervention(const RunConfig& config, const GroupRegistry& registry);

}  // namespace hessdiag
