#include "pcan/loss.hpp"

#include <algorithm>

#include "pcan/rng.hpp"

namespace pcan {
namespace {

// Picks k entries from pool in pool order when everything fits, otherwise a
// seeded k-subset. Pool order is index order, so output order is stable.
std::vector<std::size_t> pick(const std::vector<std::size_t>& pool, std::size_t k, Rng& rng) {
  if (pool.size() <= k) return pool;
  std::vector<std::size_t> chosen = rng.sample(pool.size(), k);
  std::sort(chosen.begin(), chosen.end());
  std::vector<std::size_t> out;
  out.reserve(k);
  for (std::size_t c : chosen) out.push_back(pool[c]);
  return out;
}

}  // namespace

MiningResult mine_tuples(std::span<const SubmapRef> index, const MiningConfig& cfg,
                         std::uint64_t seed) {
  cfg.validate();
  MiningResult res;

  for (std::size_t a = 0; a < index.size(); ++a) {
    std::vector<std::size_t> pos_pool, neg_pool;
    for (std::size_t j = 0; j < index.size(); ++j) {
      if (j == a) continue;
      const double d = utm_distance(index[a], index[j]);
      if (d <= cfg.positive_radius) pos_pool.push_back(j);
      if (d >= cfg.negative_radius) neg_pool.push_back(j);
    }
    if (pos_pool.empty()) {
      ++res.skipped_no_positive;
      continue;
    }
    if (neg_pool.size() < 2) {
      ++res.skipped_no_negative;
      continue;
    }

    // Per-anchor stream: the tuple for anchor a is independent of how other
    // anchors were processed, so mining can shard by anchor.
    Rng rng(Rng::mix(seed, a));

    TrainingTuple t;
    t.anchor = a;
    t.positives = pick(pos_pool, cfg.n_pos, rng);
    t.negatives = pick(neg_pool, std::max<std::size_t>(cfg.n_neg, 2), rng);

    std::vector<std::size_t> other_pool;
    for (std::size_t j : neg_pool) {
      bool far_from_all = true;
      for (std::size_t n : t.negatives) {
        if (j == n || utm_distance(index[j], index[n]) < cfg.negative_radius) {
          far_from_all = false;
          break;
        }
      }
      if (far_from_all) other_pool.push_back(j);
    }
    if (other_pool.empty()) {
      ++res.skipped_no_other;
      continue;
    }
    t.other_negative = other_pool[rng.below(other_pool.size())];
    res.tuples.push_back(std::move(t));
  }
  return res;
}

}  // namespace pcan
