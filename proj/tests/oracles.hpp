#pragma once

// Brute-force reference implementations, written independently of the library
// kernels: each recomputes everything from scratch with plain scans so a bug
// in a kernel cannot hide in its own oracle.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "pcan/loss.hpp"
#include "pcan/tensor.hpp"

namespace oracle {

inline double dist2(const pcan::Tensor<double>& pts, std::size_t a, std::size_t b) {
  double s = 0;
  for (std::size_t d = 0; d < 3; ++d) {
    const double diff = pts(a, d) - pts(b, d);
    s += diff * diff;
  }
  return s;
}

// Lexicographic coordinate order with index as the final tie key.
inline bool lex_less(const pcan::Tensor<double>& pts, std::size_t a, std::size_t b) {
  for (std::size_t d = 0; d < 3; ++d) {
    if (pts(a, d) != pts(b, d)) return pts(a, d) < pts(b, d);
  }
  return a < b;
}

// Greedy farthest-point selection, recomputing every candidate's distance to
// the whole selected set at each step (no incremental min-distance cache).
inline std::vector<std::size_t> fps(const pcan::Tensor<double>& pts, std::size_t n_samples) {
  const std::size_t n = pts.rows();
  double mean[3] = {0, 0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < 3; ++d) mean[d] += pts(i, d);
  }
  for (double& m : mean) m /= static_cast<double>(n);

  auto dist2_to_mean = [&](std::size_t i) {
    double s = 0;
    for (std::size_t d = 0; d < 3; ++d) {
      const double diff = pts(i, d) - mean[d];
      s += diff * diff;
    }
    return s;
  };

  std::size_t seed = 0;
  for (std::size_t i = 1; i < n; ++i) {
    const double di = dist2_to_mean(i), ds = dist2_to_mean(seed);
    if (di > ds || (di == ds && lex_less(pts, i, seed))) seed = i;
  }

  std::vector<std::size_t> sel{seed};
  while (sel.size() < n_samples) {
    std::size_t best = 0;
    double best_d = -1;
    bool have = false;
    for (std::size_t i = 0; i < n; ++i) {
      double mind = std::numeric_limits<double>::infinity();
      for (std::size_t s : sel) mind = std::min(mind, dist2(pts, i, s));
      if (!have || mind > best_d || (mind == best_d && lex_less(pts, i, best))) {
        best = i;
        best_d = mind;
        have = true;
      }
    }
    sel.push_back(best);
  }
  return sel;
}

// All points within the radius in ascending index order, truncated to k, then
// padded by the first entry (or the centroid itself when nothing qualifies).
inline std::vector<std::size_t> ball_query_row(const pcan::Tensor<double>& pts,
                                               std::size_t centroid, double radius,
                                               std::size_t k) {
  std::vector<std::size_t> hits;
  const double rr = radius * radius;
  for (std::size_t j = 0; j < pts.rows(); ++j) {
    const double d = dist2(pts, centroid, j);
    if (std::isinf(radius) || d <= rr) hits.push_back(j);
  }
  if (hits.size() > k) hits.resize(k);
  const std::size_t pad = hits.empty() ? centroid : hits.front();
  while (hits.size() < k) hits.push_back(pad);
  return hits;
}

// Inverse-square-distance weights over the three nearest coarse points,
// ordered by (distance, index); an exact (< 1e-10) match takes weight 1.
struct InterpRow {
  std::vector<std::size_t> indices;
  std::vector<double> weights;
};

inline InterpRow three_nn_row(const pcan::Tensor<double>& fine, std::size_t i,
                              const pcan::Tensor<double>& coarse) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t j = 0; j < coarse.rows(); ++j) {
    double s = 0;
    for (std::size_t d = 0; d < 3; ++d) {
      const double diff = fine(i, d) - coarse(j, d);
      s += diff * diff;
    }
    all.emplace_back(s, j);
  }
  std::sort(all.begin(), all.end());
  const std::size_t k = std::min<std::size_t>(3, all.size());
  InterpRow row;
  for (std::size_t j = 0; j < k; ++j) row.indices.push_back(all[j].second);
  row.weights.assign(k, 0.0);
  if (all[0].first < 1e-10 * 1e-10) {
    row.weights[0] = 1.0;
    return row;
  }
  double total = 0;
  for (std::size_t j = 0; j < k; ++j) {
    row.weights[j] = 1.0 / all[j].first;
    total += row.weights[j];
  }
  for (double& w : row.weights) w /= total;
  return row;
}

// Row softmax written directly from the definition.
inline std::vector<double> softmax(const std::vector<double>& logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double sum = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

// V[k] = sum_l s[l] * a[l][k] * (f[l] - c[k]) as three explicit loops.
inline pcan::Tensor<double> weighted_vlad(const pcan::Tensor<double>& feats,
                                          const pcan::Tensor<double>& assign,
                                          const std::vector<double>& scores,
                                          const pcan::Tensor<double>& clusters) {
  const std::size_t n = feats.rows(), d = feats.cols(), k = clusters.rows();
  pcan::Tensor<double> v({k, d});
  for (std::size_t ki = 0; ki < k; ++ki) {
    for (std::size_t di = 0; di < d; ++di) {
      double acc = 0;
      for (std::size_t l = 0; l < n; ++l) {
        acc += scores[l] * assign(l, ki) * (feats(l, di) - clusters(ki, di));
      }
      v(ki, di) = acc;
    }
  }
  return v;
}

// Geographic candidate sets for one anchor under the two-radius rule.
struct MiningPools {
  std::vector<std::size_t> positives;  // within the positive radius
  std::vector<std::size_t> negatives;  // at or beyond the negative radius
};

inline MiningPools mining_pools(std::span<const pcan::SubmapRef> index, std::size_t anchor,
                                double positive_radius, double negative_radius) {
  MiningPools pools;
  for (std::size_t j = 0; j < index.size(); ++j) {
    if (j == anchor) continue;
    const double d = pcan::utm_distance(index[anchor], index[j]);
    if (d <= positive_radius) pools.positives.push_back(j);
    if (d >= negative_radius) pools.negatives.push_back(j);
  }
  return pools;
}

// Hand evaluation of the quadruplet objective from plain distance lists.
inline double quadruplet_loss(double delta_pos, const std::vector<double>& d_anchor_neg,
                              const std::vector<double>& d_other_neg, double alpha, double beta) {
  double first = 0, second = 0;
  for (double d : d_anchor_neg) first = std::max(first, alpha + delta_pos - d);
  for (double d : d_other_neg) second = std::max(second, beta + delta_pos - d);
  return std::max(0.0, first) + std::max(0.0, second);
}

// recall@n by direct counting: a query scores a hit if any of the first n
// ranked rows lies within the match radius.
inline double recall_at(const std::vector<std::vector<std::size_t>>& rankings,
                        const std::vector<pcan::SubmapRef>& queries,
                        const std::vector<pcan::SubmapRef>& db, std::size_t n,
                        double match_radius) {
  std::size_t hits = 0;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const auto& order = rankings[q];
    const std::size_t limit = std::min(n, order.size());
    for (std::size_t r = 0; r < limit; ++r) {
      if (pcan::utm_distance(queries[q], db[order[r]]) <= match_radius) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

}  // namespace oracle
