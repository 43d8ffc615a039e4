#pragma once

// Independent reference computations used only by tests.

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <vector>

#include "rmmnav/world.hpp"

namespace oracle {

inline double edge_between(const rmmnav::World& w, rmmnav::NodeId a, rmmnav::NodeId b) {
  for (const auto& nb : w.neighbors(a)) {
    if (nb.node == b) return nb.length;
  }
  return std::numeric_limits<double>::infinity();
}

/// Minimum over all simple paths, enumerated depth-first.
inline double brute_force_distance(const rmmnav::World& w, rmmnav::NodeId from, rmmnav::NodeId to) {
  double best = std::numeric_limits<double>::infinity();
  std::vector<bool> visited(w.num_nodes(), false);
  std::function<void(rmmnav::NodeId, double)> dfs = [&](rmmnav::NodeId u, double len) {
    if (u == to) {
      best = std::min(best, len);
      return;
    }
    visited[u] = true;
    for (const auto& nb : w.neighbors(u)) {
      if (!visited[nb.node]) dfs(nb.node, len + nb.length);
    }
    visited[u] = false;
  };
  dfs(from, 0.0);
  return best;
}

/// Hand-tallied sentence BLEU-4 over whitespace tokens: clipped n-gram
/// precisions, epsilon for empty matches, closest-reference brevity penalty.
inline double bleu_reference(const std::vector<std::string>& cand, const std::vector<std::vector<std::string>>& refs) {
  if (cand.empty()) return 0.0;
  long double log_sum = 0.0L;
  int orders = 0;
  for (std::size_t n = 1; n <= 4 && n <= cand.size(); ++n) {
    std::map<std::vector<std::string>, int> cc;
    for (std::size_t i = 0; i + n <= cand.size(); ++i) ++cc[{cand.begin() + i, cand.begin() + i + n}];
    long match = 0, total = 0;
    for (const auto& [g, c] : cc) {
      int best = 0;
      for (const auto& r : refs) {
        int rc = 0;
        for (std::size_t i = 0; i + n <= r.size(); ++i)
          if (std::vector<std::string>(r.begin() + i, r.begin() + i + n) == g) ++rc;
        best = std::max(best, rc);
      }
      match += std::min(c, best);
      total += c;
    }
    log_sum += std::log(match > 0 ? static_cast<long double>(match) / total : 1e-9L);
    ++orders;
  }
  const long double c = cand.size();
  long double r = -1;
  for (const auto& ref : refs) {
    const long double len = ref.size();
    if (r < 0 || std::fabs(len - c) < std::fabs(r - c) || (std::fabs(len - c) == std::fabs(r - c) && len < r)) r = len;
  }
  const long double bp = c > r ? 1.0L : std::exp(1.0L - r / c);
  return static_cast<double>(bp * std::exp(log_sum / orders));
}

}  // namespace oracle
