#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hessdiag/autodiff.hpp"

namespace hessdiag {

// Dense vector over the canonical global parameter ordering: parameters,
// gradients, Hessian-vector products and perturbation noise all use it.
using FlatVector = std::vector<double>;

// Sorted, duplicate-free global parameter indices.
using IndexSet = std::vector<std::size_t>;

// One classification example. Hierarchical and self-attention models read
// only `tokens_a`; the two-stream model reads both.
struct Example {
  std::vector<int> tokens_a;
  std::vector<int> tokens_b;
  int label = 0;

  friend bool operator==(const Example&, const Example&) = default;
};

using Batch = std::span<const Example>;

struct ParamTensorInfo {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  std::string group;  // "other" when not part of an attention component

  friend bool operator==(const ParamTensorInfo&, const ParamTensorInfo&) = default;
};

inline constexpr const char* kOtherGroup = "other";

// Maps named parameter tensors onto contiguous slices of a FlatVector.
class ParamLayout {
 public:
  const ParamTensorInfo& add(std::string name, Shape shape, std::string group = kOtherGroup);

  std::size_t dim() const noexcept { return dim_; }
  const std::vector<ParamTensorInfo>& entries() const noexcept { return entries_; }
  const ParamTensorInfo& find(const std::string& name) const;
  IndexSet indices_of(const std::string& name) const;

  friend bool operator==(const ParamLayout&, const ParamLayout&) = default;

 private:
  std::vector<ParamTensorInfo> entries_;
  std::size_t dim_ = 0;
};

using LossBuilder =
    std::function<ad::Var(ad::Tape&, std::span<const ad::Var> params, Batch batch)>;
using LogitsBuilder = LossBuilder;

// A scalar loss over a parameter layout: the graph recipe that forward,
// gradient and hvp evaluate. Logits are optional (pure objectives such as
// quadratics have none).
class Objective {
 public:
  Objective(ParamLayout layout, LossBuilder loss, LogitsBuilder logits = {});

  const ParamLayout& layout() const noexcept { return layout_; }
  std::size_t dim() const noexcept { return layout_.dim(); }
  bool has_logits() const noexcept { return static_cast<bool>(logits_); }

  // Creates one leaf per parameter tensor, filled from `params`.
  std::vector<ad::Var> bind(ad::Tape& tape, std::span<const double> params) const;
  ad::Var build_loss(ad::Tape& tape, std::span<const ad::Var> leaves, Batch batch) const;
  ad::Var build_logits(ad::Tape& tape, std::span<const ad::Var> leaves, Batch batch) const;

 private:
  ParamLayout layout_;
  LossBuilder loss_;
  LogitsBuilder logits_;
};

double forward(const Objective& objective, std::span<const double> params, Batch batch);

FlatVector gradient(const Objective& objective, std::span<const double> params, Batch batch);

FlatVector hvp(const Objective& objective, std::span<const double> params, Batch batch,
               std::span<const double> v);

// Logits for every example in `batch`, as a [batch, classes] tensor.
Tensor logits(const Objective& objective, std::span<const double> params, Batch batch);

// Euclidean norm of grad restricted to `indices`; 0 for an empty set.
double gradient_norm(std::span<const double> grad, const IndexSet& indices);

// Holds the forward pass and the differentiable first-order gradient graph
// for one (params, batch) pair, so repeated products only pay for the second
// backward sweep. Not thread-safe; use one engine per thread.
class HvpEngine {
 public:
  HvpEngine(const Objective& objective, std::span<const double> params, Batch batch);

  std::size_t dim() const noexcept { return dim_; }
  double loss() const noexcept { return loss_; }
  const FlatVector& gradient() const noexcept { return gradient_; }

  FlatVector apply(std::span<const double> v);

 private:
  std::unique_ptr<ad::Tape> tape_;
  std::vector<ad::Var> leaves_;
  std::vector<ad::Var> grads_;
  std::vector<std::pair<std::size_t, std::size_t>> slices_;  // offset, size per leaf
  std::size_t mark_ = 0;
  std::size_t dim_ = 0;
  double loss_ = 0.0;
  FlatVector gradient_;
};

}  // namespace hessdiag
