#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "hessdiag/config.hpp"

namespace hessdiag {

// File names inside a run's output directory.
namespace artifacts {
inline constexpr const char* kRunConfig = "run_config.json";
inline constexpr const char* kTimestamps = "timestamps.json";
inline constexpr const char* kCheckpoint = "checkpoint.bin";
inline constexpr const char* kTrainData = "train.jsonl";
inline constexpr const char* kTestData = "test.jsonl";
inline constexpr const char* kTrainTrace = "train_trace.csv";
inline constexpr const char* kCurvatureJson = "curvature.json";
inline constexpr const char* kCurvatureText = "curvature.txt";
inline constexpr const char* kTrials = "trials.csv";
inline constexpr const char* kSweepSummary = "sweep_summary.csv";
inline constexpr const char* kInteraction = "interaction.json";
inline constexpr const char* kIntervention = "intervention.json";
inline constexpr const char* kSummary = "summary.md";
}  // namespace artifacts

// Every file a full run writes except the timestamp sidecar; these are the
// payloads covered by the determinism contract.
std::vector<std::string> payload_files();

// Each stage reads the artifacts of earlier stages from config.output_dir
// (or `out_dir` when non-empty) and writes its own. Progress lines go to `log`.
void cmd_train(const RunConfig& config, std::ostream& log, const std::filesystem::path& out_dir = {});
void cmd_curvature(const RunConfig& config, std::ostream& log, const std::filesystem::path& out_dir = {});
void cmd_perturb(const RunConfig& config, std::ostream& log, const std::filesystem::path& out_dir = {});
void cmd_interact(const RunConfig& config, std::ostream& log, const std::filesystem::path& out_dir = {});
void cmd_intervene(const RunConfig& config, std::ostream& log, const std::filesystem::path& out_dir = {});
// Needs only the directory. Missing sections are marked "not run"; throws
// MissingArtifactError naming the files when none is present.
void cmd_report(const std::filesystem::path& out_dir, std::ostream& log);

// train -> curvature -> perturb -> interact -> intervene -> report.
void run_all(const RunConfig& config, std::ostream& log, const std::filesystem::path& out_dir = {});

// Quick internal consistency checks; one PASS/FAIL line each.
bool run_selftest(std::ostream& out);

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitDivergence = 3;
inline constexpr int kExitMissingArtifact = 4;

// Maps the in-flight exception to an exit code; call from a catch block.
int exit_code_for_current_exception() noexcept;

}  // namespace hessdiag
