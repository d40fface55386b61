#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hessdiag/diagnosis.hpp"
#include "hessdiag/perturbation.hpp"
#include "hessdiag/trainer.hpp"

namespace hessdiag {

inline constexpr int kReportSchemaVersion = 1;

// Shortest decimal that parses back to the same double; "nan", "inf", "-inf"
// for non-finite values.
std::string format_double(double x);
double parse_double(const std::string& text);

// Which examples the Hessian quantities were evaluated on.
struct BatchInfo {
  std::string id;
  std::string source;
  std::uint64_t seed = 0;
  std::vector<std::size_t> indices;

  friend bool operator==(const BatchInfo&, const BatchInfo&) = default;
};
BatchInfo batch_info(const DiagnosticBatch& batch);

struct CurvatureDocument {
  std::string model_kind;
  BatchInfo batch;
  EstimatorConfig estimator;
  std::vector<CurvatureVerdict> rows;
};

struct InteractionDocument {
  std::string model_kind;
  BatchInfo batch;
  std::vector<Selection> selection;
  InteractionReport report;
};

struct InterventionDocument {
  std::string model_kind;
  BatchInfo batch;
  std::size_t testset_size = 0;
  InterventionReport report;
};

// Serializers validate before writing; readers validate after parsing. Both
// throw IoError naming the file and the violated rule.
std::string curvature_json(const CurvatureDocument& doc);
CurvatureDocument parse_curvature_json(const std::string& text, const std::string& source);
std::string interaction_json(const InteractionDocument& doc);
InteractionDocument parse_interaction_json(const std::string& text, const std::string& source);
std::string intervention_json(const InterventionDocument& doc);
InterventionDocument parse_intervention_json(const std::string& text, const std::string& source);

std::string trials_csv(const std::vector<PerturbationTrial>& trials);
std::vector<PerturbationTrial> parse_trials_csv(const std::string& text, const std::string& source);
std::string sweep_summary_csv(const std::vector<SweepSummaryRow>& rows);
std::vector<SweepSummaryRow> parse_sweep_summary_csv(const std::string& text, const std::string& source);
std::string train_trace_csv(const TrainingTrace& trace);
TrainingTrace parse_train_trace_csv(const std::string& text, const std::string& source);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace hessdiag
