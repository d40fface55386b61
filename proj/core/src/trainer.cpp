#include "hessdiag/trainer.hpp"

#include <cmath>
#include <numeric>

#include "hessdiag/error.hpp"
#include "hessdiag/rng.hpp"

namespace hessdiag {

void validate(const OptimizerConfig& opt, const GroupRegistry& registry) {
  if (opt.epochs < 0) throw ConfigError("train.epochs must be nonnegative");
  if (opt.batch_size <= 0) throw ConfigError("train.batch_size must be positive");
  if (!std::isfinite(opt.learning_rate) || opt.learning_rate < 0.0) {
    throw ConfigError("train.learning_rate must be finite and nonnegative");
  }
  for (const auto& [group, scale] : opt.group_lr_scale) {
    if (!registry.contains(group)) {
      std::string known;
      for (const auto& n : registry.names()) known += (known.empty() ? "" : ", ") + n;
      throw ConfigError("train.group_lr_scale: unknown group '" + group + "' (known: " + known + ")");
    }
    if (!std::isfinite(scale) || scale < 0.0) {
      throw ConfigError("train.group_lr_scale." + group + " must be finite and nonnegative");
    }
  }
}

double accuracy(const Model& model, Batch batch) {
  if (batch.empty()) return 0.0;
  const auto pred = predict(model, batch);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) hit += pred[i] == batch[i].label ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(batch.size());
}

TrainingTrace train(Model& model, const Dataset& data, const OptimizerConfig& opt) {
  validate(opt, model.registry);
  const std::size_t n = model.params.size();
  // per-coordinate step size
  std::vector<double> step(n, opt.learning_rate);
  for (const auto& [group, scale] : opt.group_lr_scale) {
    for (std::size_t i : model.registry.indices(group)) step[i] = opt.learning_rate * scale;
  }

  TrainingTrace trace;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const auto bs = static_cast<std::size_t>(opt.batch_size);
  std::vector<Example> mb;

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    rng::Stream r(rng::derive(opt.shuffle_seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[r.below(i)]);

    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      mb.clear();
      for (std::size_t k = start; k < std::min(order.size(), start + bs); ++k) mb.push_back(data.examples[order[k]]);
      FlatVector g;
      double l = 0.0;
      try {
        l = forward(model.objective, model.params, mb);
        g = gradient(model.objective, model.params, mb);
      } catch (const NonFiniteError& e) {
        throw DivergenceError(epoch, batches, e.what());
      }
      if (!std::isfinite(l)) throw DivergenceError(epoch, batches, "loss is not finite");
      FlatVector next = model.params;
      for (std::size_t i = 0; i < n; ++i) {
        if (step[i] == 0.0) continue;  // frozen coordinates stay bit-identical
        next[i] -= step[i] * g[i];
        if (!std::isfinite(next[i])) throw DivergenceError(epoch, batches, "parameter update is not finite");
      }
      model.params = std::move(next);
      loss_sum += l;
      ++batches;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = batches > 0 ? loss_sum / batches : 0.0;
    if (model.objective.has_logits() && !data.examples.empty()) rec.accuracy = accuracy(model, data.batch());
    trace.epochs.push_back(rec);
  }
  return trace;
}

}  // namespace hessdiag
