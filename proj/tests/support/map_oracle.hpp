#pragma once

#include <cstdint>
#include <optional>
#include <vector>

namespace mtlk::testing {

// Average precision written straight from its definition: walk every cutoff
// j = 1..N of the descending ranking, recompute precision and recall from
// scratch and sum precision(j) * (recall(j) - recall(j - 1)). Position of an
// item in the ranking is the number of items that beat it (higher score, or
// equal score and lower index).
inline std::optional<double> brute_force_ap(const std::vector<double>& scores,
                                            const std::vector<std::uint8_t>& labels) {
  const std::size_t n = scores.size();
  std::size_t positives = 0;
  for (auto l : labels) positives += l;
  if (positives == 0) return std::nullopt;

  std::vector<std::size_t> at_rank(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t beaten_by = 0;
    for (std::size_t k = 0; k < n; ++k) {
      if (scores[k] > scores[i] || (scores[k] == scores[i] && k < i)) ++beaten_by;
    }
    at_rank[beaten_by] = i;
  }

  double ap = 0.0, previous_recall = 0.0;
  for (std::size_t cutoff = 1; cutoff <= n; ++cutoff) {
    std::size_t hits = 0;
    for (std::size_t r = 0; r < cutoff; ++r) hits += labels[at_rank[r]];
    const double precision = static_cast<double>(hits) / static_cast<double>(cutoff);
    const double recall = static_cast<double>(hits) / static_cast<double>(positives);
    ap += precision * (recall - previous_recall);
    previous_recall = recall;
  }
  return ap;
}

// Mean over columns (by_class) or rows of the row-major N x P matrices,
// skipping entries without positives. Returns 0 when nothing is scorable.
inline double brute_force_map(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels,
                              std::size_t n, std::size_t p, bool by_class) {
  double total = 0.0;
  std::size_t counted = 0;
  const std::size_t outer = by_class ? p : n, inner = by_class ? n : p;
  for (std::size_t a = 0; a < outer; ++a) {
    std::vector<double> s(inner);
    std::vector<std::uint8_t> l(inner);
    for (std::size_t b = 0; b < inner; ++b) {
      const std::size_t idx = by_class ? b * p + a : a * p + b;
      s[b] = scores[idx];
      l[b] = labels[idx];
    }
    if (auto ap = brute_force_ap(s, l)) {
      total += *ap;
      ++counted;
    }
  }
  return counted ? total / static_cast<double>(counted) : 0.0;
}

}  // namespace mtlk::testing
