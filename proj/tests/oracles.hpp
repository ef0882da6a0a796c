#pragma once

// Brute-force reference implementations for the acceptance checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "shortcut/model.hpp"
#include "shortcut/retrieval.hpp"
#include "test_util.hpp"

namespace shortcut::oracle {

// Covariance of each column with the label over the label variance.
inline std::vector<double> pattern(const Tensor& a, const std::vector<int>& t) {
  const std::size_t n = a.dim(0), c = a.dim(1);
  long double tm = 0;
  for (int v : t) tm += v;
  tm /= n;
  std::vector<double> out(c);
  for (std::size_t j = 0; j < c; ++j) {
    long double am = 0, sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < n; ++i) am += a[i * c + j];
    am /= n;
    for (std::size_t i = 0; i < n; ++i) {
      sxy += (a[i * c + j] - am) * (t[i] - tm);
      sxx += (t[i] - tm) * (t[i] - tm);
    }
    out[j] = static_cast<double>(sxy / sxx);
  }
  return out;
}

inline double pairwise_auc(const std::vector<double>& s, const std::vector<int>& t) {
  double win = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!t[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (t[j]) continue;
      pairs += 1;
      win += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  return win / pairs;
}

// Last bin of the lower class, by exact rational comparison of the
// between-class variance over all 256 split points; ties keep the lower one.
inline std::size_t otsu_bin(const std::vector<double>& v) {
  auto bins = otsu_bins(v);
  __int128 best_num = -1, best_den = 1;
  std::size_t best = 0;
  for (std::size_t t = 0; t < 256; ++t) {
    __int128 w0 = 0, w1 = 0, s0 = 0, s1 = 0;
    for (std::size_t b : bins) {
      if (b <= t) {
        ++w0;
        s0 += b;
      } else {
        ++w1;
        s1 += b;
      }
    }
    if (w0 == 0 || w1 == 0) continue;
    const __int128 d = s0 * w1 - s1 * w0;
    const __int128 num = d * d, den = w0 * w1;
    if (best_num < 0 || num * best_den > best_num * den) {
      best_num = num;
      best_den = den;
      best = t;
    }
  }
  return best;
}

inline double adjusted_rand(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  const std::size_t ka = *std::max_element(a.begin(), a.end()) + 1;
  const std::size_t kb = *std::max_element(b.begin(), b.end()) + 1;
  std::vector<double> table(ka * kb, 0.0), ra(ka, 0.0), rb(kb, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    table[a[i] * kb + b[i]] += 1;
    ra[a[i]] += 1;
    rb[b[i]] += 1;
  }
  auto c2 = [](double x) { return x * (x - 1) / 2; };
  double idx = 0, sa = 0, sb = 0;
  for (double v : table) idx += c2(v);
  for (double v : ra) sa += c2(v);
  for (double v : rb) sb += c2(v);
  const double expected = sa * sb / c2(static_cast<double>(a.size()));
  const double max_idx = (sa + sb) / 2;
  return max_idx == expected ? 1.0 : (idx - expected) / (max_idx - expected);
}

using LossFn = std::function<ad::Var(const ClassifierModel&, std::span<const ad::Var>)>;

// Worst relative error of the analytic parameter gradient against central
// differences, parameter tensor by parameter tensor.
inline double parameter_gradient_error(ClassifierModel model, const LossFn& loss) {
  auto params = model.bind(true);
  auto grads = ad::grad(loss(model, params), params);
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto f = [&](const Tensor& w) {
      ClassifierModel copy = model;
      copy.parameters()[p].value = w;
      return loss(copy, copy.bind(true)).value()[0];
    };
    Tensor fd = testing::central_difference(f, model.parameters()[p].value, 1e-5);
    worst = std::max(worst, testing::relative_error(grads[p].value(), fd));
  }
  return worst;
}

}  // namespace shortcut::oracle
