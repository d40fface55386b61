#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hessdiag/objective.hpp"

namespace hessdiag {

// kEngineered marks hand-built objectives (quadratics and the like) that reuse
// the diagnosis pipeline but are not produced by build_model().
enum class ModelKind { kHierarchical, kSelfAttention, kCrossAttention, kEngineered };

std::string to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& text);

struct ModelConfig {
  ModelKind kind = ModelKind::kHierarchical;
  int vocab_size = 24;
  int embed_dim = 16;
  int heads = 1;
  int classes = 2;
  int seq_len = 6;          // selfattn / crossattn tokens per stream
  int sents_per_doc = 3;    // hierarchical
  int words_per_sent = 5;   // hierarchical
  std::uint64_t init_seed = 1;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline constexpr std::size_t kMaxParameters = 20000;

// Throws ConfigError naming the violated constraint.
void validate(const ModelConfig& config);

// Number of tokens per example in stream a / stream b.
std::size_t tokens_per_example(const ModelConfig& config);
std::size_t tokens_per_example_b(const ModelConfig& config);

// Named attention components mapped to disjoint parameter index sets, in
// registration order. Everything else is "other".
class GroupRegistry {
 public:
  void add(std::string name, IndexSet indices);

  const std::vector<std::pair<std::string, IndexSet>>& groups() const noexcept { return groups_; }
  std::vector<std::string> names() const;
  bool contains(const std::string& name) const;
  const IndexSet& indices(const std::string& name) const;
  // Group name for a global index, or "other".
  std::string group_of(std::size_t index) const;
  IndexSet other(std::size_t dim) const;

  friend bool operator==(const GroupRegistry&, const GroupRegistry&) = default;

 private:
  std::vector<std::pair<std::string, IndexSet>> groups_;
};

// Registry built from the group tags of a parameter layout.
GroupRegistry registry_from_layout(const ParamLayout& layout);

struct Model {
  ModelConfig config;
  Objective objective;
  FlatVector params;
  GroupRegistry registry;

  const ParamLayout& layout() const noexcept { return objective.layout(); }
};

// Deterministic initialization from config.init_seed: each weight tensor is
// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in = shape[0]; biases zero.
Model build_model(const ModelConfig& config);

// Mean cross-entropy over the batch.
double loss(const Model& model, Batch batch);

// Argmax per example, ties to the lowest class index.
std::vector<int> predict(const Model& model, Batch batch);
std::vector<int> argmax_rows(const Tensor& logits);

// Softmax attention matrices from one forward pass, in graph order.
std::vector<Tensor> attention_maps(const Model& model, Batch batch);

// Checks that every example's token layout and labels fit the config.
void check_batch(const ModelConfig& config, Batch batch);

}  // namespace hessdiag
