#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pcan/errors.hpp"
#include "pcan/tape.hpp"
#include "pcan/tensor.hpp"

namespace pcan {

struct LossConfig {
  double alpha = 0.5;  // margin for the anchor-negative hinge
  double beta = 0.2;   // margin for the second-anchor hinge

  void validate() const {
    if (!(alpha > 0.0) || !(beta > 0.0)) {
      throw ArgumentError("loss: margins must be positive");
    }
  }
};

// Squared Euclidean distance between two descriptor variables.
template <typename T>
VarId squared_distance(Tape<T>& tape, VarId a, VarId b) {
  VarId d = tape.sub(a, b);
  return tape.sum_all(tape.mul(d, d));
}

// Lazy quadruplet objective:
//   delta_pos = min_i dist(anchor, pos_i)
//   L = max_j [alpha + delta_pos - dist(anchor, neg_j)]+
//     + max_j [beta  + delta_pos - dist(other, neg_j)]+
// with squared Euclidean distances. Only the hardest positive and the
// hardest negative in each term carry gradient.
template <typename T>
VarId lazy_quadruplet_loss_var(Tape<T>& tape, VarId anchor, std::span<const VarId> positives,
                               std::span<const VarId> negatives, VarId other_negative,
                               const LossConfig& cfg) {
  cfg.validate();
  if (positives.empty()) throw ArgumentError("lazy quadruplet loss: no positives");
  if (negatives.empty()) throw ArgumentError("lazy quadruplet loss: no negatives");

  std::vector<VarId> pos_d;
  pos_d.reserve(positives.size());
  for (VarId p : positives) pos_d.push_back(squared_distance(tape, anchor, p));
  VarId delta_pos = tape.reduce_min(tape.stack_scalars(pos_d));

  const T alpha = static_cast<T>(cfg.alpha);
  const T beta = static_cast<T>(cfg.beta);

  std::vector<VarId> first_terms, second_terms;
  first_terms.reserve(negatives.size());
  second_terms.reserve(negatives.size());
  for (VarId n : negatives) {
    VarId dn = squared_distance(tape, anchor, n);
    VarId t1 = tape.relu(tape.sub(tape.affine(delta_pos, T{1}, alpha), dn));
    first_terms.push_back(t1);
    VarId dno = squared_distance(tape, other_negative, n);
    VarId t2 = tape.relu(tape.sub(tape.affine(delta_pos, T{1}, beta), dno));
    second_terms.push_back(t2);
  }
  VarId first = tape.reduce_max(tape.stack_scalars(first_terms));
  VarId second = tape.reduce_max(tape.stack_scalars(second_terms));
  return tape.add(first, second);
}

// Value-only convenience for plain tensors.
template <typename T>
T lazy_quadruplet_loss(const Tensor<T>& anchor, const std::vector<Tensor<T>>& positives,
                       const std::vector<Tensor<T>>& negatives, const Tensor<T>& other_negative,
                       const LossConfig& cfg) {
  Tape<T> tape;
  VarId a = tape.constant(anchor);
  std::vector<VarId> pos, neg;
  for (const auto& p : positives) pos.push_back(tape.constant(p));
  for (const auto& n : negatives) neg.push_back(tape.constant(n));
  VarId o = tape.constant(other_negative);
  return tape.scalar(lazy_quadruplet_loss_var<T>(tape, a, pos, neg, o, cfg));
}

// ---- tuple mining over submap positions ----

struct SubmapRef {
  std::string id;
  double northing = 0;
  double easting = 0;
};

inline double utm_distance(const SubmapRef& a, const SubmapRef& b) {
  const double dn = a.northing - b.northing;
  const double de = a.easting - b.easting;
  return std::sqrt(dn * dn + de * de);
}

// Indices into the mined index list.
struct TrainingTuple {
  std::size_t anchor = 0;
  std::vector<std::size_t> positives;
  std::vector<std::size_t> negatives;
  std::size_t other_negative = 0;
};

struct MiningConfig {
  std::size_t n_pos = 2;
  std::size_t n_neg = 2;
  double positive_radius = 10.0;  // meters
  double negative_radius = 50.0;  // meters

  void validate() const {
    if (n_pos == 0) throw ArgumentError("mining: n_pos must be positive");
    if (n_neg < 2) throw ArgumentError("mining: need at least two negatives per tuple");
    if (!(positive_radius > 0.0) || !(negative_radius > positive_radius)) {
      throw ArgumentError("mining: radii must satisfy 0 < positive < negative");
    }
  }
};

struct MiningResult {
  std::vector<TrainingTuple> tuples;
  std::size_t skipped_no_positive = 0;
  std::size_t skipped_no_negative = 0;
  std::size_t skipped_no_other = 0;
};

// One tuple per eligible anchor, visited in index order; sampling inside the
// candidate sets is driven by the seed, so results are reproducible.
MiningResult mine_tuples(std::span<const SubmapRef> index, const MiningConfig& cfg,
                         std::uint64_t seed);

}  // namespace pcan
