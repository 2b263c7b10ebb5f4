#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "protobank/error.hpp"
#include "protobank/numerics/tensor.hpp"

namespace protobank {

struct KMeansConfig {
  std::size_t k = 8;
  std::uint64_t seed = 0;
  int max_iters = 100;
  double tol = 1e-6;
  // Independent k-means++ starts; the lowest final objective wins.
  int n_init = 10;
};

struct KMeansResult {
  Tensor centroids;                     // [k, d]
  std::vector<std::size_t> assignments;  // one cluster index per point
  std::vector<double> objective;         // after every Lloyd iteration
  int iterations = 0;

  double final_objective() const { return objective.empty() ? 0.0 : objective.back(); }
};

namespace detail {

inline double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t j = 0; j < d; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
  return s;
}

inline double kmeans_objective(const Tensor& x, const Tensor& c, const std::vector<std::size_t>& a) {
  const std::size_t d = x.cols();
  double s = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) s += sq_dist(x.row_ptr(i), c.row_ptr(a[i]), d);
  return s;
}

// Greedy k-means++: first center uniform; each later step draws
// 2 + floor(ln k) candidates with probability proportional to the squared
// distance to the nearest chosen center and keeps the one that lowers the
// potential most.
inline Tensor kmeanspp_seed(const Tensor& x, std::size_t k, std::mt19937_64& rng) {
  const std::size_t n = x.rows(), d = x.cols();
  const std::size_t trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(k)));
  Tensor c({k, d});
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::size_t pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  std::vector<char> taken(n, 0);
  // Point drawn with probability nearest[i] / total.
  auto draw = [&](double total) {
    double u = std::uniform_real_distribution<double>(0.0, total)(rng);
    std::size_t p = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      if (nearest[i] > 0.0 && (u -= nearest[i]) <= 0.0) {
        p = i;
        break;
      }
    }
    // Guard against the roundoff fall-through landing on a zero-weight point.
    while (nearest[p] == 0.0) p = (p + n - 1) % n;
    return p;
  };
  for (std::size_t m = 0; m < k; ++m) {
    if (m > 0) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) total += nearest[i];
      if (total > 0.0) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t t = 0; t < trials; ++t) {
          const std::size_t cand = draw(total);
          double potential = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            potential += std::min(nearest[i], sq_dist(x.row_ptr(i), x.row_ptr(cand), d));
          }
          if (potential < best) {
            best = potential;
            pick = cand;
          }
        }
      } else {
        // All remaining points coincide with centers; take the first unused one.
        pick = static_cast<std::size_t>(std::find(taken.begin(), taken.end(), 0) - taken.begin());
      }
    }
    taken[pick] = 1;
    std::copy(x.row_ptr(pick), x.row_ptr(pick) + d, c.row_ptr(m));
    for (std::size_t i = 0; i < n; ++i) nearest[i] = std::min(nearest[i], sq_dist(x.row_ptr(i), c.row_ptr(m), d));
  }
  return c;
}

inline KMeansResult lloyd(const Tensor& x, Tensor c, int max_iters, double tol) {
  const std::size_t n = x.rows(), d = x.cols(), k = c.rows();
  KMeansResult r;
  r.assignments.assign(n, 0);
  for (int it = 0; it < std::max(1, max_iters); ++it) {
    std::vector<std::size_t> count(k, 0);
    std::vector<double> dist(n);
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t m = 0; m < k; ++m) {
        const double dd = sq_dist(x.row_ptr(i), c.row_ptr(m), d);
        if (dd < best) {
          best = dd;
          r.assignments[i] = m;
        }
      }
      dist[i] = best;
      ++count[r.assignments[i]];
    }
    // Empty clusters take the point farthest from its centroid, drawn from a
    // cluster that can spare it.
    for (std::size_t m = 0; m < k; ++m) {
      if (count[m] != 0) continue;
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (count[r.assignments[i]] < 2) continue;
        if (far == n || dist[i] > dist[far]) far = i;
      }
      --count[r.assignments[far]];
      r.assignments[far] = m;
      count[m] = 1;
      dist[far] = 0.0;
    }
    Tensor next({k, d});
    for (std::size_t i = 0; i < n; ++i) {
      double* row = next.row_ptr(r.assignments[i]);
      for (std::size_t j = 0; j < d; ++j) row[j] += x.data[i * d + j];
    }
    double shift = 0.0;
    for (std::size_t m = 0; m < k; ++m) {
      double* row = next.row_ptr(m);
      for (std::size_t j = 0; j < d; ++j) row[j] /= static_cast<double>(count[m]);
      shift = std::max(shift, std::sqrt(sq_dist(row, c.row_ptr(m), d)));
    }
    c = std::move(next);
    r.iterations = it + 1;
    r.objective.push_back(kmeans_objective(x, c, r.assignments));
    if (shift < tol) break;
  }
  r.centroids = std::move(c);
  return r;
}

// Hartigan refinement of a Lloyd fixed point: move single points whenever
// that strictly lowers the objective, i.e. when
//   n_b/(n_b+1) |x-c_b|^2 < n_a/(n_a-1) |x-c_a|^2,
// with exact means recomputed after every pass.
inline void hartigan(const Tensor& x, KMeansResult& r, int max_passes) {
  const std::size_t n = x.rows(), d = x.cols(), k = r.centroids.rows();
  Tensor& c = r.centroids;
  std::vector<double> count(k, 0.0);
  for (std::size_t a : r.assignments) count[a] += 1.0;
  for (int pass = 0; pass < max_passes; ++pass) {
    const Tensor prev_c = c;
    const std::vector<std::size_t> prev_a = r.assignments;
    const std::vector<double> prev_count = count;
    bool moved = false;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t a = r.assignments[i];
      if (count[a] < 2.0) continue;
      const double* xi = x.row_ptr(i);
      const double leave = count[a] / (count[a] - 1.0) * sq_dist(xi, c.row_ptr(a), d);
      std::size_t to = a;
      double best = leave;
      for (std::size_t b = 0; b < k; ++b) {
        if (b == a) continue;
        const double join = count[b] / (count[b] + 1.0) * sq_dist(xi, c.row_ptr(b), d);
        if (join < best * (1.0 - 1e-12)) {
          best = join;
          to = b;
        }
      }
      if (to == a) continue;
      // Incremental mean updates keep later decisions in this pass exact enough.
      double* ca = c.row_ptr(a);
      double* cb = c.row_ptr(to);
      for (std::size_t j = 0; j < d; ++j) {
        ca[j] = (ca[j] * count[a] - xi[j]) / (count[a] - 1.0);
        cb[j] = (cb[j] * count[to] + xi[j]) / (count[to] + 1.0);
      }
      count[a] -= 1.0;
      count[to] += 1.0;
      r.assignments[i] = to;
      moved = true;
    }
    if (!moved) break;
    Tensor exact({k, d});
    for (std::size_t i = 0; i < n; ++i) {
      double* row = exact.row_ptr(r.assignments[i]);
      for (std::size_t j = 0; j < d; ++j) row[j] += x.data[i * d + j];
    }
    for (std::size_t m = 0; m < k; ++m) {
      for (std::size_t j = 0; j < d; ++j) exact.row_ptr(m)[j] /= count[m];
    }
    c = std::move(exact);
    const double obj = kmeans_objective(x, c, r.assignments);
    // A pass that roundoff made worse is undone.
    if (!r.objective.empty() && obj > r.objective.back()) {
      c = prev_c;
      r.assignments = prev_a;
      count = prev_count;
      break;
    }
    r.objective.push_back(obj);
    r.iterations += 1;
  }
}

}  // namespace detail

// Seeded k-means on the rows of `points` [n, d]; k is clamped to n.
inline KMeansResult kmeans(const Tensor& points, const KMeansConfig& cfg) {
  if (points.rank() != 2) throw NumericError("kmeans: points must be an [n, d] matrix");
  if (points.rows() == 0) throw NumericError("kmeans: no points");
  if (cfg.k == 0) throw NumericError("kmeans: k must be positive");
  if (!points.all_finite()) throw NumericError("kmeans: non-finite input");
  const std::size_t k = std::min(cfg.k, points.rows());
  std::mt19937_64 rng(cfg.seed);
  KMeansResult best;
  for (int run = 0; run < std::max(1, cfg.n_init); ++run) {
    KMeansResult r = detail::lloyd(points, detail::kmeanspp_seed(points, k, rng), cfg.max_iters, cfg.tol);
    detail::hartigan(points, r, cfg.max_iters);
    if (run == 0 || r.final_objective() < best.final_objective()) best = std::move(r);
  }
  return best;
}

inline KMeansResult kmeans(const Tensor& points, std::size_t k, std::uint64_t seed, int max_iters = 100,
                           double tol = 1e-6) {
  KMeansConfig cfg;
  cfg.k = k;
  cfg.seed = seed;
  cfg.max_iters = max_iters;
  cfg.tol = tol;
  return kmeans(points, cfg);
}

}  // namespace protobank
