#include "shortcut/train.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "shortcut/rng.hpp"

namespace shortcut {

ad::Var cross_entropy(const ad::Var& logits, const std::vector<std::size_t>& labels) {
  const std::size_t n = labels.size();
  if (n == 0) throw std::invalid_argument("cross_entropy on empty batch");
  ad::Var picked = ad::pick(ad::log_softmax(logits), labels);
  return ad::scale(ad::sum(picked), -1.0 / static_cast<double>(n));
}

Batch make_batch(const TrainingSet& data, std::span<const std::size_t> rows) {
  const Shape& s = data.inputs.shape();
  const std::size_t stride = data.inputs.size() / s[0];
  Shape bs = s;
  bs[0] = rows.size();
  std::vector<double> values(rows.size() * stride);
  Batch b;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(data.inputs.data() + rows[i] * stride, stride, values.begin() +
                static_cast<std::ptrdiff_t>(i * stride));
    b.labels.push_back(data.labels.at(rows[i]));
  }
  b.inputs = Tensor(std::move(bs), std::move(values));
  b.indices.assign(rows.begin(), rows.end());
  return b;
}

TrainResult train(ClassifierModel model, const TrainingSet& data, const TrainConfig& config) {
  if (data.size() == 0) throw std::invalid_argument("train: empty train split");
  if (data.inputs.rank() != 4 || data.inputs.dim(0) != data.size()) {
    throw std::invalid_argument("train: inputs must be [N, C, H, W] with one label per row");
  }
  if (config.batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  TrainResult result{std::move(model), {}, {}};
  ClassifierModel& m = result.model;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(config.seed);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(std::span(order));
    double total = 0.0, aux_total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t count = std::min(config.batch_size, order.size() - start);
      Batch batch = make_batch(data, std::span(order).subspan(start, count));
      auto params = m.bind(true);
      ad::Var loss = cross_entropy(m.forward(ad::Var(batch.inputs), params), batch.labels);
      double aux_value = 0.0;
      if (config.auxiliary_loss) {
        ad::Var aux = config.auxiliary_loss(m, params, batch);
        aux_value = aux.value()[0];
        loss = ad::add(loss, ad::scale(aux, config.auxiliary_weight));
      }
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << ", batch " << batches
            << " (auxiliary term " << aux_value << ")";
        throw std::runtime_error(msg.str());
      }
      auto grads = ad::grad(loss, params);
      double step = config.learning_rate;
      if (config.max_grad_norm > 0.0) {
        double sq = 0.0;
        for (const auto& g : grads)
          for (double v : g.value().values()) sq += v * v;
        const double norm = std::sqrt(sq);
        if (norm > config.max_grad_norm) step *= config.max_grad_norm / norm;
      }
      for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& w = m.parameters()[p].value;
        const Tensor& g = grads[p].value();
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= step * g[i];
      }
      total += value;
      aux_total += aux_value;
      ++batches;
    }
    result.loss_history.push_back(total / static_cast<double>(batches));
    result.auxiliary_history.push_back(aux_total / static_cast<double>(batches));
  }
  return result;
}

Tensor batched_logits(const ClassifierModel& model, const Tensor& inputs, std::size_t chunk) {
  const std::size_t n = inputs.dim(0);
  std::vector<double> values;
  values.reserve(n * model.num_classes());
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t count = std::min(chunk, n - start);
    Tensor z = model.logits(inputs.slice(start, count));
    values.insert(values.end(), z.values().begin(), z.values().end());
  }
  return Tensor({n, model.num_classes()}, std::move(values));
}

std::vector<std::size_t> batched_predict(const ClassifierModel& model, const Tensor& inputs,
                                         std::size_t chunk) {
  Tensor z = batched_logits(model, inputs, chunk);
  const std::size_t n = z.dim(0), k = z.dim(1);
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (z[i * k + j] > z[i * k + best]) best = j;
    }
    out[i] = best;
  }
  return out;
}

double accuracy(const ClassifierModel& model, const TrainingSet& data) {
  if (data.size() == 0) return 0.0;
  auto pred = batched_predict(model, data.inputs);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

}  // namespace shortcut
