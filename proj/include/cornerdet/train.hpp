#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "cornerdet/data.hpp"
#include "cornerdet/losses.hpp"
#include "cornerdet/model.hpp"
#include "cornerdet/targets.hpp"

namespace cornerdet {

struct TrainConfig {
  AdamConfig adam;
  LossConfig loss;
  TargetConfig targets;  // grid size and class count are taken from the model
  int batch_size = 8;
  int iterations = 5000;
  bool flip_augment = true;
  std::uint64_t seed = 1;
};

struct StepLog {
  LossParts parts;  // summed over stacks
  double total = 0;
};

template <typename T>
struct LossGraph {
  Var<T> total;
  LossParts parts;
};

/// Target settings matching the model's grid and classes.
TargetConfig targets_for_model(const ModelConfig& model, TargetConfig base);

/// Forward pass plus the weighted loss, summed over stacks.
template <typename T>
LossGraph<T> model_loss(Graph<T>& g, Model<T>& model, const Tensor<T>& images,
                        const std::vector<TargetMaps>& targets, const LossConfig& cfg, bool train = true);

/// One optimisation step on `batch`: targets, loss, backward, Adam.
/// Throws std::runtime_error (naming the images) on a non-finite loss.
template <typename T>
StepLog train_step(Model<T>& model, const std::vector<Sample>& batch, const TrainConfig& cfg);

/// Epoch-shuffled minibatch training with optional horizontal flips.
class Trainer {
 public:
  Trainer(Model<float>& model, const std::vector<Sample>& data, TrainConfig cfg);

  StepLog step();
  /// Runs `iterations` steps; `on_step(step_index, log)` after each.
  void run(int iterations, const std::function<void(int, const StepLog&)>& on_step = {});
  int steps_done() const { return steps_; }

 private:
  std::vector<Sample> next_batch();

  Model<float>& model_;
  const std::vector<Sample>& data_;
  TrainConfig cfg_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  int steps_ = 0;
};

}  // namespace cornerdet
