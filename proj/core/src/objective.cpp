#include "hessdiag/objective.hpp"

#include <algorithm>
#include <cmath>

#include "hessdiag/error.hpp"

namespace hessdiag {

const ParamTensorInfo& ParamLayout::add(std::string name, Shape shape, std::string group) {
  for (const auto& e : entries_) {
    if (e.name == name) throw ConfigError("duplicate parameter tensor '" + name + "'");
  }
  ParamTensorInfo info;
  info.name = std::move(name);
  info.size = shape_size(shape);
  info.shape = std::move(shape);
  info.offset = dim_;
  info.group = std::move(group);
  dim_ += info.size;
  entries_.push_back(std::move(info));
  return entries_.back();
}

const ParamTensorInfo& ParamLayout::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw ConfigError("unknown parameter tensor '" + name + "'");
}

IndexSet ParamLayout::indices_of(const std::string& name) const {
  const auto& e = find(name);
  IndexSet out(e.size);
  for (std::size_t i = 0; i < e.size; ++i) out[i] = e.offset + i;
  return out;
}

Objective::Objective(ParamLayout layout, LossBuilder loss, LogitsBuilder logits)
    : layout_(std::move(layout)), loss_(std::move(loss)), logits_(std::move(logits)) {
  if (!loss_) throw ConfigError("objective needs a loss builder");
}

std::vector<ad::Var> Objective::bind(ad::Tape& tape, std::span<const double> params) const {
  if (params.size() != layout_.dim()) {
    throw DimensionError("parameter vector has dim " + std::to_string(params.size()) +
                         ", model expects " + std::to_string(layout_.dim()));
  }
  std::vector<ad::Var> leaves;
  leaves.reserve(layout_.entries().size());
  for (const auto& e : layout_.entries()) {
    std::vector<double> values(params.begin() + static_cast<std::ptrdiff_t>(e.offset),
                               params.begin() + static_cast<std::ptrdiff_t>(e.offset + e.size));
    leaves.push_back(tape.leaf(Tensor(e.shape, std::move(values))));
  }
  return leaves;
}

ad::Var Objective::build_loss(ad::Tape& tape, std::span<const ad::Var> leaves, Batch batch) const {
  ad::Var out = loss_(tape, leaves, batch);
  if (out.value().size() != 1) {
    throw ShapeError("loss builder returned shape " + shape_to_string(out.shape()) + ", expected a scalar");
  }
  return out;
}

ad::Var Objective::build_logits(ad::Tape& tape, std::span<const ad::Var> leaves, Batch batch) const {
  if (!logits_) throw ConfigError("objective has no classifier output");
  return logits_(tape, leaves, batch);
}

namespace {

FlatVector flatten(const std::vector<Tensor>& parts, std::size_t dim) {
  FlatVector out;
  out.reserve(dim);
  for (const auto& t : parts) out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

}  // namespace

double forward(const Objective& objective, std::span<const double> params, Batch batch) {
  ad::Tape tape;
  const auto leaves = objective.bind(tape, params);
  return objective.build_loss(tape, leaves, batch).value().item();
}

FlatVector gradient(const Objective& objective, std::span<const double> params, Batch batch) {
  ad::Tape tape;
  const auto leaves = objective.bind(tape, params);
  const ad::Var loss = objective.build_loss(tape, leaves, batch);
  return flatten(ad::grad_values(loss, leaves), objective.dim());
}

FlatVector hvp(const Objective& objective, std::span<const double> params, Batch batch,
               std::span<const double> v) {
  HvpEngine engine(objective, params, batch);
  return engine.apply(v);
}

Tensor logits(const Objective& objective, std::span<const double> params, Batch batch) {
  ad::Tape tape;
  const auto leaves = objective.bind(tape, params);
  return objective.build_logits(tape, leaves, batch).value();
}

double gradient_norm(std::span<const double> grad, const IndexSet& indices) {
  double sum = 0.0;
  for (std::size_t i : indices) {
    if (i >= grad.size()) {
      throw DimensionError("index " + std::to_string(i) + " outside gradient of dim " +
                           std::to_string(grad.size()));
    }
    sum += grad[i] * grad[i];
  }
  return std::sqrt(sum);
}

HvpEngine::HvpEngine(const Objective& objective, std::span<const double> params, Batch batch)
    : tape_(std::make_unique<ad::Tape>()), dim_(objective.dim()) {
  leaves_ = objective.bind(*tape_, params);
  const ad::Var loss = objective.build_loss(*tape_, leaves_, batch);
  loss_ = loss.value().item();
  grads_ = ad::grad(loss, leaves_);
  gradient_.reserve(dim_);
  for (std::size_t i = 0; i < leaves_.size(); ++i) {
    const auto& e = objective.layout().entries()[i];
    slices_.emplace_back(e.offset, e.size);
    const auto g = grads_[i].value().values();
    gradient_.insert(gradient_.end(), g.begin(), g.end());
  }
  mark_ = tape_->size();
}

FlatVector HvpEngine::apply(std::span<const double> v) {
  if (v.size() != dim_) {
    throw DimensionError("hvp direction has dim " + std::to_string(v.size()) + ", expected " +
                         std::to_string(dim_));
  }
  FlatVector out(dim_, 0.0);
  try {
    // <grad L, v>, skipping tensors where v vanishes
    std::optional<ad::Var> inner;
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      const auto [offset, size] = slices_[i];
      const auto part = v.subspan(offset, size);
      if (std::all_of(part.begin(), part.end(), [](double x) { return x == 0.0; })) continue;
      const ad::Var dir = tape_->constant(
          Tensor(grads_[i].shape(), std::vector<double>(part.begin(), part.end())));
      const ad::Var term = ad::dot(grads_[i], dir);
      inner = inner ? ad::add(*inner, term) : term;
    }
    if (inner) {
      const auto parts = ad::grad_values(*inner, leaves_);
      std::size_t pos = 0;
      for (const auto& t : parts) {
        std::copy(t.values().begin(), t.values().end(),
                  out.begin() + static_cast<std::ptrdiff_t>(pos));
        pos += t.size();
      }
    }
  } catch (...) {
    tape_->truncate(mark_);
    throw;
  }
  tape_->truncate(mark_);
  return out;
}

}  // namespace hessdiag
