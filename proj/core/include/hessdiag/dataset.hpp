#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hessdiag/models.hpp"
#include "hessdiag/objective.hpp"

namespace hessdiag {

// Synthetic class-conditional token data. Tokens [0, classes) are class
// markers; the rest of the vocabulary is noise. Each example carries
// `signal_tokens` markers of its own class and `distractor_tokens` markers of
// other classes at random positions, so the label is only recoverable by
// looking at the right tokens.
struct DataSpec {
  ModelKind kind = ModelKind::kHierarchical;
  int vocab_size = 24;
  int classes = 2;
  int length_a = 15;   // tokens in stream a
  int length_b = 0;    // tokens in stream b (two-stream models only)
  int train_size = 64;
  int test_size = 32;
  int signal_tokens = 2;
  int distractor_tokens = 1;

  friend bool operator==(const DataSpec&, const DataSpec&) = default;
};

// Spec whose token layout matches `config`.
DataSpec data_spec_for(const ModelConfig& config, int train_size, int test_size, int signal_tokens = 2,
                       int distractor_tokens = 1);

enum class Split { kTrain, kTest };

std::string to_string(Split split);

struct Dataset {
  std::vector<Example> examples;
  Split split = Split::kTrain;
  std::uint64_t gen_seed = 0;

  Batch batch() const noexcept { return examples; }
  std::size_t size() const noexcept { return examples.size(); }
};

struct GeneratedData {
  Dataset train;
  Dataset test;
};

// Deterministic in (spec, seed); the two splits share no identical example.
GeneratedData gen_dataset(const DataSpec& spec, std::uint64_t seed);

void validate(const DataSpec& spec);

// One JSON object per line: {"a": [...], "b": [...], "label": k}.
void save_jsonl(const Dataset& data, const std::filesystem::path& path);
Dataset load_jsonl(const std::filesystem::path& path, Split split, std::uint64_t gen_seed = 0);

// Fixed subset of a dataset used for every Hessian evaluation of a run.
struct DiagnosticBatch {
  std::vector<Example> examples;
  std::vector<std::size_t> indices;  // positions in the source split
  std::uint64_t seed = 0;
  std::string source;                // split name

  Batch batch() const noexcept { return examples; }
  // Stable identifier: source, size and seed.
  std::string id() const;
};

DiagnosticBatch make_diagnostic_batch(const Dataset& source, std::size_t size, std::uint64_t seed);

}  // namespace hessdiag
