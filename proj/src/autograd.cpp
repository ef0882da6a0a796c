#include "shortcut/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace shortcut::ad {
namespace {

thread_local bool g_grad_enabled = true;

using Backward = std::function<std::vector<Var>(const Var&)>;

Var make(Tensor value, std::vector<Var> inputs, Backward backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Var& v) { return v.requires_grad(); });
  if (g_grad_enabled && any) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Var::from_node(std::move(node));
}

void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a.value().rank() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got " + shape_string(a.shape()));
  }
}

}  // namespace

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
EnableGradGuard::EnableGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = true; }
EnableGradGuard::~EnableGradGuard() { g_grad_enabled = previous_; }

std::vector<Var> grad(const Var& output, const std::vector<Var>& wrt, bool create_graph,
                      const Var& seed) {
  if (!output.defined()) throw std::invalid_argument("grad: undefined output");
  // Post-order DFS over the recorded graph.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  if (output.requires_grad()) {
    std::vector<std::pair<Node*, std::size_t>> stack{{output.node(), 0}};
    visited.insert(output.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node* child = node->inputs[next++].node();
        if (child && child->requires_grad && visited.insert(child).second) {
          stack.emplace_back(child, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::unordered_map<Node*, Var> grads;
  {
    Var start = seed.defined() ? seed : Var(Tensor(output.shape(), 1.0));
    if (start.shape() != output.shape()) throw std::invalid_argument("grad: seed shape mismatch");
    grads[output.node()] = start;
  }

  bool previous = g_grad_enabled;
  g_grad_enabled = create_graph;
  try {
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (!node->backward) continue;
      auto found = grads.find(node);
      if (found == grads.end()) continue;
      const Var g = found->second;
      std::vector<Var> parts = node->backward(g);
      for (std::size_t i = 0; i < parts.size(); ++i) {
        const Var& in = node->inputs[i];
        if (!parts[i].defined() || !in.requires_grad()) continue;
        auto [slot, inserted] = grads.try_emplace(in.node(), parts[i]);
        if (!inserted) slot->second = add(slot->second, parts[i]);
      }
    }
  } catch (...) {
    g_grad_enabled = previous;
    throw;
  }
  g_grad_enabled = previous;

  std::vector<Var> result;
  result.reserve(wrt.size());
  for (const Var& w : wrt) {
    auto found = w.defined() ? grads.find(w.node()) : grads.end();
    if (found != grads.end()) {
      result.push_back(found->second);
    } else {
      result.emplace_back(Tensor(w.shape()));
    }
  }
  return result;
}

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  return make(a.value() + b.value(), {a, b},
              [](const Var& g) { return std::vector<Var>{g, g}; });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  return make(a.value() - b.value(), {a, b},
              [](const Var& g) { return std::vector<Var>{g, scale(g, -1.0)}; });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make(std::move(out), {a, b},
              [a, b](const Var& g) { return std::vector<Var>{mul(g, b), mul(g, a)}; });
}

Var mul_const(const Var& a, const Tensor& c) {
  if (a.shape() != c.shape()) throw std::invalid_argument("mul_const: shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  return make(std::move(out), {a},
              [c](const Var& g) { return std::vector<Var>{mul_const(g, c)}; });
}

Var scale(const Var& a, double s) {
  return make(a.value() * s, {a},
              [s](const Var& g) { return std::vector<Var>{scale(g, s)}; });
}

Var exp(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = std::exp(v);
  return make(std::move(out), {a},
              [a](const Var& g) { return std::vector<Var>{mul(g, exp(a))}; });
}

Var relu(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return make(std::move(out), {a},
              [a](const Var& g) { return std::vector<Var>{relu_mask(g, a)}; });
}

Var relu_mask(const Var& g, const Var& ref) {
  require_same(g, ref, "relu_mask");
  Tensor out = g.value();
  const Tensor& r = ref.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(r[i] > 0.0)) out[i] = 0.0;
  }
  return make(std::move(out), {g},
              [ref](const Var& gg) { return std::vector<Var>{relu_mask(gg, ref)}; });
}

Var sum(const Var& a) {
  Shape in = a.shape();
  return make(Tensor(Shape{}, {a.value().sum()}), {a},
              [in](const Var& g) { return std::vector<Var>{expand(g, in)}; });
}

Var expand(const Var& scalar, const Shape& shape) {
  if (scalar.value().size() != 1) throw std::invalid_argument("expand: not a scalar");
  return make(Tensor(shape, scalar.value()[0]), {scalar},
              [](const Var& g) { return std::vector<Var>{sum(g)}; });
}

Var reshape(const Var& a, const Shape& shape) {
  Shape in = a.shape();
  return make(a.value().reshaped(shape), {a},
              [in](const Var& g) { return std::vector<Var>{reshape(g, in)}; });
}

Var rowsum(const Var& a) {
  require_rank(a, 2, "rowsum");
  const std::size_t n = a.shape()[0], k = a.shape()[1];
  Tensor out({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += a.value()[i * k + j];
    out[i] = s;
  }
  return make(std::move(out), {a},
              [k](const Var& g) { return std::vector<Var>{row_broadcast(g, k)}; });
}

Var row_broadcast(const Var& a, std::size_t k) {
  if (a.value().rank() != 2 || a.shape()[1] != 1) {
    throw std::invalid_argument("row_broadcast expects [N,1]");
  }
  const std::size_t n = a.shape()[0];
  Tensor out({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = a.value()[i];
  }
  return make(std::move(out), {a}, [](const Var& g) { return std::vector<Var>{rowsum(g)}; });
}

Var pick(const Var& a, const std::vector<std::size_t>& cols) {
  require_rank(a, 2, "pick");
  const std::size_t n = a.shape()[0], k = a.shape()[1];
  if (cols.size() != n) throw std::invalid_argument("pick: one column per row required");
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    if (cols[i] >= k) throw std::out_of_range("pick: column out of range");
    out[i] = a.value()[i * k + cols[i]];
  }
  return make(std::move(out), {a},
              [cols, k](const Var& g) { return std::vector<Var>{unpick(g, cols, k)}; });
}

Var unpick(const Var& a, const std::vector<std::size_t>& cols, std::size_t k) {
  const std::size_t n = cols.size();
  if (a.value().size() != n) throw std::invalid_argument("unpick: size mismatch");
  Tensor out({n, k});
  for (std::size_t i = 0; i < n; ++i) out[i * k + cols[i]] = a.value()[i];
  return make(std::move(out), {a},
              [cols](const Var& g) { return std::vector<Var>{pick(g, cols)}; });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) throw std::invalid_argument("matmul: inner dimension mismatch");
  Tensor out({m, n});
  const double* pa = a.value().data();
  const double* pb = b.value().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * pb[p * n + j];
    }
  }
  return make(std::move(out), {a, b}, [a, b](const Var& g) {
    return std::vector<Var>{matmul(g, transpose(b)), matmul(transpose(a), g)};
  });
}

Var transpose(const Var& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.value()[i * n + j];
  }
  return make(std::move(out), {a}, [](const Var& g) { return std::vector<Var>{transpose(g)}; });
}

Var conv2d(const Var& x, const Var& w, kernels::ConvGeometry geo) {
  return make(kernels::conv2d(x.value(), w.value(), geo), {x, w}, [x, w, geo](const Var& g) {
    return std::vector<Var>{conv2d_input_grad(g, w, x.shape(), geo),
                            conv2d_weight_grad(x, g, w.shape(), geo)};
  });
}

Var conv2d_input_grad(const Var& gy, const Var& w, const Shape& x_shape,
                      kernels::ConvGeometry geo) {
  return make(kernels::conv2d_input_grad(gy.value(), w.value(), x_shape, geo), {gy, w},
              [gy, w, geo](const Var& u) {
                return std::vector<Var>{conv2d(u, w, geo),
                                        conv2d_weight_grad(u, gy, w.shape(), geo)};
              });
}

Var conv2d_weight_grad(const Var& x, const Var& gy, const Shape& w_shape,
                       kernels::ConvGeometry geo) {
  return make(kernels::conv2d_weight_grad(x.value(), gy.value(), w_shape, geo), {x, gy},
              [x, gy, geo](const Var& v) {
                return std::vector<Var>{conv2d_input_grad(gy, v, x.shape(), geo),
                                        conv2d(x, v, geo)};
              });
}

Var add_channel_bias(const Var& x, const Var& b) {
  Tensor out = x.value() + kernels::channel_broadcast(b.value(), x.shape());
  return make(std::move(out), {x, b},
              [](const Var& g) { return std::vector<Var>{g, channel_sum(g)}; });
}

Var channel_sum(const Var& x) {
  Shape in = x.shape();
  return make(kernels::channel_sum(x.value()), {x},
              [in](const Var& g) { return std::vector<Var>{channel_broadcast(g, in)}; });
}

Var channel_broadcast(const Var& v, const Shape& shape) {
  return make(kernels::channel_broadcast(v.value(), shape), {v},
              [](const Var& g) { return std::vector<Var>{channel_sum(g)}; });
}

Var max_pool(const Var& x, std::size_t kh, std::size_t kw) {
  kernels::PoolResult pr = kernels::max_pool(x.value(), kh, kw);
  Shape in = x.shape();
  kernels::PoolIndex idx = pr.argmax;
  return make(std::move(pr.output), {x},
              [idx, in](const Var& g) { return std::vector<Var>{scatter(g, idx, in)}; });
}

Var gather(const Var& x, kernels::PoolIndex index, const Shape& out_shape) {
  Shape in = x.shape();
  return make(kernels::gather(x.value(), *index, out_shape), {x},
              [index, in](const Var& g) { return std::vector<Var>{scatter(g, index, in)}; });
}

Var scatter(const Var& y, kernels::PoolIndex index, const Shape& in_shape) {
  Shape out = y.shape();
  return make(kernels::scatter(y.value(), *index, in_shape), {y},
              [index, out](const Var& g) { return std::vector<Var>{gather(g, index, out)}; });
}

Var log_softmax(const Var& x) {
  require_rank(x, 2, "log_softmax");
  const std::size_t n = x.shape()[0], k = x.shape()[1];
  Tensor out = x.value();
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.data() + i * k;
    const double m = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < k; ++j) row[j] -= lse;
  }
  return make(std::move(out), {x}, [x, k](const Var& g) {
    Var softmax = exp(log_softmax(x));
    return std::vector<Var>{sub(g, mul(softmax, row_broadcast(rowsum(g), k)))};
  });
}

}  // namespace shortcut::ad
