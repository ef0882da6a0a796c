#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "shortcut/autograd.hpp"
#include "shortcut/model.hpp"

namespace shortcut {

struct TrainingSet {
  Tensor inputs;  // [N, C, H, W]
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
};

struct Batch {
  Tensor inputs;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> indices;  // rows of the TrainingSet
};

// Extra loss term evaluated on a batch; it must be built from the bound
// parameters so that its gradient reaches them.
using AuxiliaryLoss =
    std::function<ad::Var(const ClassifierModel&, std::span<const ad::Var>, const Batch&)>;

struct TrainConfig {
  double learning_rate = 0.05;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  AuxiliaryLoss auxiliary_loss;
  double auxiliary_weight = 0.0;
  // Global gradient-norm clip per step; 0 disables.
  double max_grad_norm = 0.0;
};

struct TrainResult {
  ClassifierModel model;
  std::vector<double> loss_history;       // mean total loss per epoch
  std::vector<double> auxiliary_history;  // mean auxiliary term per epoch
};

// Mean cross-entropy of logits [N, K] against labels.
ad::Var cross_entropy(const ad::Var& logits, const std::vector<std::size_t>& labels);

// Mini-batch SGD with a fixed learning rate. Batch order is a seeded shuffle
// per epoch. Throws std::runtime_error on a non-finite loss.
TrainResult train(ClassifierModel model, const TrainingSet& data, const TrainConfig& config);

Batch make_batch(const TrainingSet& data, std::span<const std::size_t> rows);

double accuracy(const ClassifierModel& model, const TrainingSet& data);

// Logits for a possibly large set, evaluated in chunks.
Tensor batched_logits(const ClassifierModel& model, const Tensor& inputs,
                      std::size_t chunk = 64);
std::vector<std::size_t> batched_predict(const ClassifierModel& model, const Tensor& inputs,
                                         std::size_t chunk = 64);

}  // namespace shortcut
