#include "shortcut/reveal.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "shortcut/attribution.hpp"
#include "shortcut/rng.hpp"

namespace shortcut {

using nlohmann::json;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string to_string(Axis a) { return a == Axis::Samples ? "samples" : "channels"; }

namespace {

Eigen::Map<const Matrix> as_matrix(const Tensor& t) {
  return {t.data(), static_cast<Eigen::Index>(t.dim(0)),
          static_cast<Eigen::Index>(t.size() / std::max<std::size_t>(t.dim(0), 1))};
}

Tensor from_matrix(const Matrix& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  std::copy_n(m.data(), t.size(), t.data());
  return t;
}

void require_rows(const Tensor& t, const char* what) {
  if (t.rank() < 2 || t.dim(0) == 0) throw std::invalid_argument(std::string(what) + ": need [N, d]");
}

// Seeded k-means++ with restarts; returns labels in first-appearance order.
std::vector<std::size_t> kmeans(const Matrix& x, std::size_t k, std::uint64_t seed,
                                std::size_t restarts = 10) {
  const Eigen::Index n = x.rows();
  std::vector<std::size_t> best;
  double best_inertia = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < restarts; ++r) {
    Rng rng(derive_seed(seed, r));
    Matrix centers(static_cast<Eigen::Index>(k), x.cols());
    centers.row(0) = x.row(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n))));
    std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
    for (std::size_t c = 1; c < k; ++c) {
      double total = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        d2[static_cast<std::size_t>(i)] = std::min(
            d2[static_cast<std::size_t>(i)],
            (x.row(i) - centers.row(static_cast<Eigen::Index>(c - 1))).squaredNorm());
        total += d2[static_cast<std::size_t>(i)];
      }
      Eigen::Index pick = 0;
      if (total > 0.0) {
        double u = rng.uniform() * total;
        for (pick = 0; pick < n - 1; ++pick) {
          u -= d2[static_cast<std::size_t>(pick)];
          if (u < 0.0) break;
        }
      } else {
        pick = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
      }
      centers.row(static_cast<Eigen::Index>(c)) = x.row(pick);
    }
    std::vector<std::size_t> labels(static_cast<std::size_t>(n), 0);
    double inertia = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      bool changed = iter == 0;
      inertia = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        std::size_t arg = 0;
        double dist = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) {
          const double v = (x.row(i) - centers.row(static_cast<Eigen::Index>(c))).squaredNorm();
          if (v < dist) dist = v, arg = c;
        }
        inertia += dist;
        if (labels[static_cast<std::size_t>(i)] != arg) changed = true;
        labels[static_cast<std::size_t>(i)] = arg;
      }
      if (!changed) break;
      Matrix sums = Matrix::Zero(static_cast<Eigen::Index>(k), x.cols());
      std::vector<std::size_t> counts(k, 0);
      for (Eigen::Index i = 0; i < n; ++i) {
        sums.row(static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)])) += x.row(i);
        ++counts[labels[static_cast<std::size_t>(i)]];
      }
      for (std::size_t c = 0; c < k; ++c) {
        if (counts[c]) {
          centers.row(static_cast<Eigen::Index>(c)) =
              sums.row(static_cast<Eigen::Index>(c)) / static_cast<double>(counts[c]);
        }
      }
    }
    if (inertia < best_inertia - 1e-12) {
      best_inertia = inertia;
      best = labels;
    }
  }
  std::vector<std::size_t> remap(k, k);
  std::size_t next = 0;
  for (std::size_t& l : best) {
    if (remap[l] == k) remap[l] = next++;
    l = remap[l];
  }
  return best;
}

}  // namespace

DistanceMatrix pairwise_distances(const Tensor& vectors, Axis axis) {
  require_rows(vectors, "pairwise_distances");
  auto x = as_matrix(vectors);
  const Eigen::Index n = x.rows();
  Eigen::VectorXd norms = x.rowwise().norm();
  Matrix gram = x * x.transpose();
  DistanceMatrix d;
  d.axis = axis;
  d.values = Tensor({static_cast<std::size_t>(n), static_cast<std::size_t>(n)});
  for (Eigen::Index i = 0; i < n; ++i) {
    if (norms(i) == 0.0) d.zero_rows.push_back(static_cast<std::size_t>(i));
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      double v = 1.0;
      if (norms(i) > 0.0 && norms(j) > 0.0) {
        v = 1.0 - std::clamp(gram(i, j) / (norms(i) * norms(j)), -1.0, 1.0);
        if (v < 1e-15) v = 0.0;
      }
      d.values[static_cast<std::size_t>(i * n + j)] = v;
      d.values[static_cast<std::size_t>(j * n + i)] = v;
    }
  }
  return d;
}

Tensor knn_affinity(const DistanceMatrix& d, std::size_t k_nn) {
  const std::size_t n = d.size();
  Tensor a({n, n});
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t p, std::size_t q) { return d(i, p) < d(i, q); });
    std::size_t taken = 0;
    for (std::size_t j : order) {
      if (taken == k_nn) break;
      if (j == i) continue;
      a[i * n + j] = 1.0;
      a[j * n + i] = 1.0;
      ++taken;
    }
  }
  return a;
}

std::size_t eigengap_suggestion(const std::vector<double>& eigenvalues, std::size_t k_max) {
  std::size_t best = 1;
  double gap = -1.0;
  for (std::size_t k = 1; k < std::min(k_max + 1, eigenvalues.size()); ++k) {
    const double g = eigenvalues[k - 1] - eigenvalues[k];
    if (g > gap + 1e-12) gap = g, best = k;
  }
  return best;
}

ClusterAssignment spectral_clustering(const DistanceMatrix& d, std::size_t k, std::uint64_t seed,
                                      std::size_t k_nn) {
  const std::size_t n = d.size();
  if (k == 0 || k > n) {
    throw std::invalid_argument("k = " + std::to_string(k) + " must be in [1, " +
                                std::to_string(n) + "]");
  }
  ClusterAssignment out;
  out.axis = d.axis;
  out.k = k;
  out.labels.assign(n, 0);
  if (n == 1) return out;
  Tensor a = knn_affinity(d, std::min(k_nn, n - 1));
  auto am = as_matrix(a);
  Eigen::VectorXd deg = am.rowwise().sum();
  Eigen::VectorXd inv_sqrt = deg.unaryExpr([](double v) { return v > 0 ? 1.0 / std::sqrt(v) : 0.0; });
  Matrix l = inv_sqrt.asDiagonal() * am * inv_sqrt.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(l);
  const Eigen::Index m = static_cast<Eigen::Index>(n);
  for (Eigen::Index i = m - 1; i >= 0; --i) out.eigenvalues.push_back(eig.eigenvalues()(i));
  out.suggested_k = eigengap_suggestion(out.eigenvalues, std::min<std::size_t>(10, n - 1));
  if (k == 1) return out;
  Matrix u(m, static_cast<Eigen::Index>(k));
  for (std::size_t c = 0; c < k; ++c) u.col(static_cast<Eigen::Index>(c)) = eig.eigenvectors().col(m - 1 - static_cast<Eigen::Index>(c));
  for (Eigen::Index i = 0; i < m; ++i) {
    const double norm = u.row(i).norm();
    if (norm > 0.0) u.row(i) /= norm;
  }
  out.labels = kmeans(u, k, seed);
  return out;
}

Embedding2D classical_mds(const DistanceMatrix& d) {
  const Eigen::Index n = static_cast<Eigen::Index>(d.size());
  Embedding2D e;
  e.axis = d.axis;
  e.coords = Tensor({d.size(), 2});
  if (n < 2) return e;
  Matrix sq = as_matrix(d.values).array().square();
  Matrix j = Matrix::Identity(n, n) - Matrix::Constant(n, n, 1.0 / static_cast<double>(n));
  Matrix b = -0.5 * j * sq * j;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(b);
  const double top = std::max(0.0, eig.eigenvalues()(n - 1));
  for (Eigen::Index c = 0; c < 2 && c < n; ++c) {
    double lambda = eig.eigenvalues()(n - 1 - c);
    // Round-off eigenvalues of a rank-deficient Gram matrix count as zero.
    if (lambda <= 1e-12 * top) lambda = 0.0;
    Eigen::VectorXd v = eig.eigenvectors().col(n - 1 - c);
    // Fix the sign so the largest-magnitude entry is positive.
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    for (Eigen::Index i = 0; i < n; ++i) {
      e.coords[static_cast<std::size_t>(i * 2 + c)] = v(i) * std::sqrt(lambda);
    }
  }
  return e;
}

std::vector<double> local_outlier_factor(const Tensor& points, std::size_t k) {
  require_rows(points, "local_outlier_factor");
  auto x = as_matrix(points);
  const std::size_t n = points.dim(0);
  if (k == 0 || k >= n) throw std::invalid_argument("LOF needs 1 <= k < N");
  Matrix dist(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          (x.row(static_cast<Eigen::Index>(i)) - x.row(static_cast<Eigen::Index>(j))).norm();
  std::vector<std::vector<std::size_t>> nbrs(n);
  std::vector<double> kdist(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> order;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) order.push_back(j);
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t p, std::size_t q) {
      return dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p)) <
             dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(q));
    });
    order.resize(k);
    kdist[i] = dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(order.back()));
    nbrs[i] = std::move(order);
  }
  std::vector<double> lrd(n);
  for (std::size_t i = 0; i < n; ++i) {
    double reach = 0.0;
    for (std::size_t o : nbrs[i]) {
      reach += std::max(kdist[o], dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(o)));
    }
    lrd[i] = 1.0 / (reach / static_cast<double>(k) + 1e-10);
  }
  std::vector<double> lof(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t o : nbrs[i]) s += lrd[o];
    lof[i] = s / static_cast<double>(k) / lrd[i];
  }
  return lof;
}

SprayResult spray(const Tensor& relevances, std::size_t k, std::uint64_t seed) {
  require_rows(relevances, "spray");
  if (k > relevances.dim(0)) {
    throw std::invalid_argument("k = " + std::to_string(k) + " exceeds the " +
                                std::to_string(relevances.dim(0)) + " samples");
  }
  SprayResult r;
  Tensor flat = relevances.reshaped({relevances.dim(0), relevances.size() / relevances.dim(0)});
  r.distances = pairwise_distances(flat, Axis::Samples);
  r.clusters = spectral_clustering(r.distances, k, seed);
  r.embedding = classical_mds(r.distances);
  return r;
}

double fisher_score(const Tensor& vectors, const std::vector<std::size_t>& labels) {
  require_rows(vectors, "fisher_score");
  auto x = as_matrix(vectors);
  if (labels.size() != vectors.dim(0)) throw std::invalid_argument("one label per row required");
  const std::size_t k = *std::max_element(labels.begin(), labels.end()) + 1;
  Eigen::RowVectorXd mu = x.colwise().mean();
  Matrix means = Matrix::Zero(static_cast<Eigen::Index>(k), x.cols());
  std::vector<double> counts(k, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    means.row(static_cast<Eigen::Index>(labels[i])) += x.row(static_cast<Eigen::Index>(i));
    counts[labels[i]] += 1.0;
  }
  double sb = 0.0, sw = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c] == 0.0) continue;
    means.row(static_cast<Eigen::Index>(c)) /= counts[c];
    sb += counts[c] * (means.row(static_cast<Eigen::Index>(c)) - mu).squaredNorm();
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    sw += (x.row(static_cast<Eigen::Index>(i)) - means.row(static_cast<Eigen::Index>(labels[i])))
              .squaredNorm();
  }
  return sb / (sw + 1e-9);
}

std::vector<RankedClustering> rank_clusterings(const std::vector<ClusteringCandidate>& candidates) {
  std::vector<RankedClustering> out;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    std::vector<std::size_t> distinct = c.labels;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (distinct.size() < 2) {
      throw std::invalid_argument("clustering '" + c.name + "' has fewer than 2 clusters");
    }
    Tensor flat = c.vectors.reshaped({c.vectors.dim(0), c.vectors.size() / c.vectors.dim(0)});
    out.push_back({c.name, i, fisher_score(flat, c.labels)});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const RankedClustering& a, const RankedClustering& b) { return a.score > b.score; });
  return out;
}

std::vector<std::size_t> ConceptEmbedding::outliers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < lof.size(); ++i) {
    if (lof[i] > outlier_threshold) out.push_back(i);
  }
  std::stable_sort(out.begin(), out.end(), [&](std::size_t a, std::size_t b) { return lof[a] > lof[b]; });
  return out;
}

ConceptEmbedding concept_embedding(const Tensor& latent) {
  if (latent.rank() != 2 || latent.dim(0) < 2 || latent.dim(1) < 2) {
    throw std::invalid_argument("concept_embedding needs [N >= 2, C >= 2]");
  }
  Matrix cols = as_matrix(latent).transpose();
  ConceptEmbedding e;
  e.distances = pairwise_distances(from_matrix(cols), Axis::Channels);
  const std::size_t c = latent.dim(1);
  e.inactive = e.distances.zero_rows;
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < c; ++i) {
    if (!std::binary_search(e.inactive.begin(), e.inactive.end(), i)) active.push_back(i);
  }
  e.embedding.axis = Axis::Channels;
  e.embedding.coords = Tensor({c, 2});
  e.lof.assign(c, 0.0);
  if (active.size() < 2) return e;
  DistanceMatrix sub;
  sub.axis = Axis::Channels;
  sub.values = Tensor({active.size(), active.size()});
  for (std::size_t i = 0; i < active.size(); ++i)
    for (std::size_t j = 0; j < active.size(); ++j)
      sub.values[i * active.size() + j] = e.distances(active[i], active[j]);
  Embedding2D emb = classical_mds(sub);
  e.embedding.method = emb.method;
  for (std::size_t i = 0; i < active.size(); ++i) {
    e.embedding.coords[active[i] * 2] = emb.coords[i * 2];
    e.embedding.coords[active[i] * 2 + 1] = emb.coords[i * 2 + 1];
  }
  auto lof = local_outlier_factor(emb.coords, std::min<std::size_t>(10, active.size() - 1));
  for (std::size_t i = 0; i < active.size(); ++i) e.lof[active[i]] = lof[i];
  return e;
}

DistanceMatrix dora_distances(const Tensor& pooled,
                              const std::vector<std::vector<std::size_t>>& references) {
  require_rows(pooled, "dora_distances");
  const std::size_t c = pooled.dim(1);
  if (references.size() != c) throw std::invalid_argument("one reference set per channel required");
  Tensor r({c, c});
  for (std::size_t i = 0; i < c; ++i) {
    if (references[i].empty()) {
      throw std::invalid_argument("channel " + std::to_string(i) + " has no reference samples");
    }
    for (std::size_t row : references[i]) {
      for (std::size_t j = 0; j < c; ++j) r[i * c + j] += pooled[row * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) r[i * c + j] /= static_cast<double>(references[i].size());
  }
  return pairwise_distances(r, Axis::Channels);
}

DistanceMatrix dora_distances(const ClassifierModel& model, std::string_view layer,
                              const Tensor& inputs, std::size_t refs_per_channel) {
  Tensor pooled = channel_scores(model, layer, inputs, ReferenceMode::Activation);
  const std::size_t n = pooled.dim(0), c = pooled.dim(1);
  if (refs_per_channel == 0 || refs_per_channel > n) {
    throw std::invalid_argument("refs_per_channel must be in [1, N]");
  }
  std::vector<std::vector<std::size_t>> refs(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return pooled[a * c + ch] > pooled[b * c + ch];
    });
    order.resize(refs_per_channel);
    refs[ch] = std::move(order);
  }
  return dora_distances(pooled, refs);
}

namespace {

struct GmmFit {
  Matrix means, vars;
  Eigen::VectorXd weights;
  Matrix resp;
  double log_likelihood = -std::numeric_limits<double>::infinity();
  bool ok = false;
};

GmmFit fit_gmm(const Matrix& x, std::size_t k, Rng& rng, double var_floor) {
  const Eigen::Index n = x.rows(), d = x.cols(), kk = static_cast<Eigen::Index>(k);
  GmmFit f;
  Eigen::RowVectorXd global_var =
      ((x.rowwise() - x.colwise().mean()).array().square().colwise().mean()).matrix();
  // k-means++ style seeding of the means.
  f.means.resize(kk, d);
  f.means.row(0) = x.row(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n))));
  for (Eigen::Index c = 1; c < kk; ++c) {
    std::vector<double> d2(static_cast<std::size_t>(n));
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (Eigen::Index q = 0; q < c; ++q) best = std::min(best, (x.row(i) - f.means.row(q)).squaredNorm());
      d2[static_cast<std::size_t>(i)] = best;
      total += best;
    }
    Eigen::Index pick = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (pick = 0; pick < n - 1; ++pick) {
        u -= d2[static_cast<std::size_t>(pick)];
        if (u < 0.0) break;
      }
    }
    f.means.row(c) = x.row(pick);
  }
  f.vars = global_var.cwiseMax(var_floor).replicate(kk, 1);
  f.weights = Eigen::VectorXd::Constant(kk, 1.0 / static_cast<double>(k));
  f.resp.resize(n, kk);
  constexpr double log2pi = 1.8378770664093453;
  double prev = -std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < 500; ++iter) {
    // E-step in log space.
    double ll = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index c = 0; c < kk; ++c) {
        double lp = std::log(f.weights(c));
        for (Eigen::Index j = 0; j < d; ++j) {
          const double diff = x(i, j) - f.means(c, j);
          lp -= 0.5 * (log2pi + std::log(f.vars(c, j)) + diff * diff / f.vars(c, j));
        }
        f.resp(i, c) = lp;
        mx = std::max(mx, lp);
      }
      double s = 0.0;
      for (Eigen::Index c = 0; c < kk; ++c) s += std::exp(f.resp(i, c) - mx);
      const double lse = mx + std::log(s);
      for (Eigen::Index c = 0; c < kk; ++c) f.resp(i, c) = std::exp(f.resp(i, c) - lse);
      ll += lse;
    }
    f.log_likelihood = ll;
    // M-step.
    Eigen::VectorXd nk = f.resp.colwise().sum().transpose();
    for (Eigen::Index c = 0; c < kk; ++c) {
      if (nk(c) < 1.0) return f;  // collapsed component
      f.weights(c) = nk(c) / static_cast<double>(n);
      f.means.row(c) = (f.resp.col(c).transpose() * x) / nk(c);
      for (Eigen::Index j = 0; j < d; ++j) {
        double v = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
          const double diff = x(i, j) - f.means(c, j);
          v += f.resp(i, c) * diff * diff;
        }
        f.vars(c, j) = std::max(v / nk(c), var_floor);
      }
    }
    if (std::abs(ll - prev) <= 1e-10 * std::max(1.0, std::abs(ll))) break;
    prev = ll;
  }
  f.ok = std::isfinite(f.log_likelihood);
  return f;
}

}  // namespace

PrototypeSet pcx(const Tensor& relevances, std::size_t k, std::uint64_t seed,
                 std::size_t class_label) {
  require_rows(relevances, "pcx");
  const std::size_t n = relevances.dim(0);
  if (k == 0 || n < 5 * k) {
    throw std::invalid_argument("pcx needs N >= 5K (N = " + std::to_string(n) + ", K = " +
                                std::to_string(k) + ")");
  }
  Matrix x = as_matrix(relevances.reshaped({n, relevances.size() / n}));
  const double scale = ((x.rowwise() - x.colwise().mean()).array().square().mean());
  const double var_floor = 1e-6 * scale + 1e-12;
  GmmFit best;
  std::size_t successes = 0, attempts = 0;
  while (successes < 10) {
    if (attempts >= 20) break;
    Rng rng(derive_seed(seed, attempts++));
    GmmFit f = fit_gmm(x, k, rng, var_floor);
    if (!f.ok) continue;
    ++successes;
    if (f.log_likelihood > best.log_likelihood) best = std::move(f);
  }
  if (successes == 0) throw std::runtime_error("pcx: every EM restart degenerated");

  PrototypeSet out;
  out.class_label = class_label;
  out.log_likelihood = best.log_likelihood;
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return best.weights(static_cast<Eigen::Index>(a)) > best.weights(static_cast<Eigen::Index>(b));
  });
  std::vector<std::size_t> rank(k);
  for (std::size_t r = 0; r < k; ++r) rank[order[r]] = r;
  out.prototypes.resize(k);
  for (std::size_t r = 0; r < k; ++r) {
    const auto c = static_cast<Eigen::Index>(order[r]);
    Prototype& p = out.prototypes[r];
    p.weight = best.weights(c);
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      p.mean.push_back(best.means(c, j));
      p.variance.push_back(best.vars(c, j));
    }
    p.top_concepts.resize(p.mean.size());
    std::iota(p.top_concepts.begin(), p.top_concepts.end(), 0);
    std::stable_sort(p.top_concepts.begin(), p.top_concepts.end(),
                     [&](std::size_t a, std::size_t b) { return p.mean[a] > p.mean[b]; });
  }
  out.assignment.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Index arg;
    best.resp.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
    out.assignment[i] = rank[static_cast<std::size_t>(arg)];
    out.prototypes[out.assignment[i]].covered.push_back(i);
  }
  return out;
}

json to_json(const Embedding2D& e) {
  json pts = json::array();
  for (std::size_t i = 0; i < e.coords.dim(0); ++i) pts.push_back({e.coords[2 * i], e.coords[2 * i + 1]});
  return {{"axis", to_string(e.axis)}, {"method", e.method}, {"coords", pts}};
}

json to_json(const ClusterAssignment& c) {
  return {{"axis", to_string(c.axis)}, {"k", c.k},
          {"labels", c.labels},        {"method", c.method},
          {"eigenvalues", c.eigenvalues}, {"suggested_k", c.suggested_k}};
}

json to_json(const ConceptEmbedding& c) {
  return {{"embedding", to_json(c.embedding)},
          {"lof", c.lof},
          {"outlier_threshold", c.outlier_threshold},
          {"inactive", c.inactive},
          {"outliers", c.outliers()}};
}

json to_json(const PrototypeSet& p) {
  json protos = json::array();
  for (const Prototype& q : p.prototypes) {
    std::vector<std::size_t> top(q.top_concepts.begin(),
                                 q.top_concepts.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(5, q.top_concepts.size())));
    protos.push_back({{"weight", q.weight}, {"mean", q.mean}, {"covered", q.covered}, {"top_concepts", top}});
  }
  return {{"class", p.class_label}, {"log_likelihood", p.log_likelihood}, {"prototypes", protos}};
}

}  // namespace shortcut
