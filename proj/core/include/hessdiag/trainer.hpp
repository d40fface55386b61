#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hessdiag/dataset.hpp"
#include "hessdiag/models.hpp"

namespace hessdiag {

struct OptimizerConfig {
  int epochs = 40;
  int batch_size = 8;
  double learning_rate = 0.5;
  // Multiplier on learning_rate per registry group; missing groups use 1.
  std::map<std::string, double> group_lr_scale;
  std::uint64_t shuffle_seed = 3;

  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

void validate(const OptimizerConfig& opt, const GroupRegistry& registry);

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;                 // mean minibatch loss over the epoch
  std::optional<double> accuracy;    // train accuracy after the epoch, when labels exist
};

struct TrainingTrace {
  std::vector<EpochRecord> epochs;
};

// Plain minibatch SGD, in place. Throws DivergenceError on a non-finite loss
// or gradient; `model.params` then holds the last finite state.
TrainingTrace train(Model& model, const Dataset& data, const OptimizerConfig& opt);

double accuracy(const Model& model, Batch batch);

}  // namespace hessdiag
