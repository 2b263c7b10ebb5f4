#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "protobank/declarations.hpp"
#include "protobank/error.hpp"

namespace protobank {

// ceil(fraction * n), tolerant of representation error in the product.
inline std::size_t top_count(double fraction, std::size_t n) {
  const double raw = fraction * static_cast<double>(n);
  return std::min(n, static_cast<std::size_t>(std::ceil(raw - 1e-9)));
}

// Positions ordered by descending score, ties by ascending record id.
inline std::vector<std::size_t> rank_by_score(std::span<const double> scores, const CountryDataset& ds) {
  if (scores.size() != ds.size()) {
    throw DataError("got " + std::to_string(scores.size()) + " scores for " + std::to_string(ds.size()) + " records");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ds[a].id < ds[b].id;
  });
  return order;
}

// Share of the total sealed revenue captured by inspecting the top
// ceil(rate * n) records by score.
inline double revenue_at_k(std::span<const double> scores, const CountryDataset& test, double rate) {
  if (test.empty()) throw DataError("revenue_at_k: empty test set");
  if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError("revenue_at_k: rate must lie in (0, 1]");
  double total = 0.0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& s = test.sealed()[i];
    if (!s) throw DataError("revenue_at_k: record " + std::to_string(test[i].id) + " has no sealed outcome");
    total += s->revenue;
  }
  if (!(total > 0.0)) throw DataError("revenue_at_k: total revenue is zero, metric undefined");
  const auto order = rank_by_score(scores, test);
  const std::size_t m = top_count(rate, test.size());
  double caught = 0.0;
  for (std::size_t i = 0; i < m; ++i) caught += test.sealed()[order[i]]->revenue;
  return caught / total;
}

}  // namespace protobank
