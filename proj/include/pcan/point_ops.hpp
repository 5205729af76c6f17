#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pcan/errors.hpp"
#include "pcan/rng.hpp"
#include "pcan/tape.hpp"
#include "pcan/tensor.hpp"

namespace pcan {

template <typename T>
struct PointCloud {
  Tensor<T> coords;                   // N x 3
  std::vector<std::uint8_t> labels;   // empty, or one label per point

  std::size_t size() const { return coords.dim(0); }

  void validate() const {
    if (coords.rank() != 2 || coords.dim(1) != 3) {
      throw DimensionError("point cloud: coords must be N x 3, got " + coords.shape_str());
    }
    if (!coords.finite()) throw ValidationError("point cloud: non-finite coordinate");
    if (!labels.empty() && labels.size() != coords.dim(0)) {
      throw DimensionError("point cloud: label count does not match point count");
    }
  }
};

template <typename To, typename From>
PointCloud<To> cloud_cast(const PointCloud<From>& in) {
  Tensor<To> coords(in.coords.shape());
  for (std::size_t i = 0; i < coords.size(); ++i) {
    coords.values()[i] = static_cast<To>(in.coords.values()[i]);
  }
  return PointCloud<To>{std::move(coords), in.labels};
}

// Neighborhood table: for each of the N' centroids, exactly k point indices.
struct GroupIndex {
  std::vector<std::size_t> centroids;  // N' indices into the cloud
  std::vector<std::size_t> neighbors;  // N' * k indices, row per centroid
  std::size_t k = 0;

  std::size_t n_groups() const { return centroids.size(); }

  std::size_t at(std::size_t g, std::size_t j) const { return neighbors[g * k + j]; }

  void validate(std::size_t n_points) const {
    if (k == 0 || neighbors.size() != centroids.size() * k) {
      throw CorruptionError("group index: neighbor table does not match centroid count");
    }
    for (std::size_t i : centroids) {
      if (i >= n_points) throw CorruptionError("group index: centroid index out of range");
    }
    for (std::size_t i : neighbors) {
      if (i >= n_points) throw CorruptionError("group index: neighbor index out of range");
    }
  }
};

template <typename T>
inline T squared_dist3(const T* a, const T* b) {
  const T dx = a[0] - b[0];
  const T dy = a[1] - b[1];
  const T dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

// Greedy farthest point sampling. The seed is the point farthest from the
// cloud mean and every later pick maximizes the minimum distance to the
// already-selected set. Ties resolve by lexicographic coordinate order, then
// original index, so the selected coordinate sequence is stable under input
// permutation. The returned indices are in selection order.
template <typename T>
std::vector<std::size_t> farthest_point_sample(const PointCloud<T>& cloud, std::size_t n_samples) {
  cloud.validate();
  const std::size_t n = cloud.size();
  if (n_samples < 1 || n_samples > n) {
    throw ArgumentError("farthest_point_sample: need 1 <= n_samples <= " + std::to_string(n) +
                        ", got " + std::to_string(n_samples));
  }
  const T* pts = cloud.coords.values().data();

  auto lex_less = [&](std::size_t a, std::size_t b) {
    const T* pa = pts + a * 3;
    const T* pb = pts + b * 3;
    for (int d = 0; d < 3; ++d) {
      if (pa[d] != pb[d]) return pa[d] < pb[d];
    }
    return a < b;
  };

  T mean[3] = {T{0}, T{0}, T{0}};
  for (std::size_t i = 0; i < n; ++i) {
    for (int d = 0; d < 3; ++d) mean[d] += pts[i * 3 + d];
  }
  for (int d = 0; d < 3; ++d) mean[d] /= static_cast<T>(n);

  std::size_t seed = 0;
  T seed_d = squared_dist3(pts, mean);
  for (std::size_t i = 1; i < n; ++i) {
    const T d = squared_dist3(pts + i * 3, mean);
    if (d > seed_d || (d == seed_d && lex_less(i, seed))) {
      seed = i;
      seed_d = d;
    }
  }

  std::vector<std::size_t> selected;
  selected.reserve(n_samples);
  selected.push_back(seed);
  std::vector<T> min_d(n);
  for (std::size_t i = 0; i < n; ++i) min_d[i] = squared_dist3(pts + i * 3, pts + seed * 3);

  while (selected.size() < n_samples) {
    std::size_t best = 0;
    bool have = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (!have || min_d[i] > min_d[best] || (min_d[i] == min_d[best] && lex_less(i, best))) {
        best = i;
        have = true;
      }
    }
    selected.push_back(best);
    const T* pb = pts + best * 3;
    for (std::size_t i = 0; i < n; ++i) min_d[i] = std::min(min_d[i], squared_dist3(pts + i * 3, pb));
  }
  return selected;
}

// For each centroid, up to k cloud points within radius (inclusive), taken in
// ascending original-index order. Rows with fewer than k hits are padded by
// repeating the first hit; a centroid with no hits repeats its own index.
template <typename T>
GroupIndex ball_query(const PointCloud<T>& cloud, std::span<const std::size_t> centroid_indices,
                      double radius, std::size_t k) {
  cloud.validate();
  if (k == 0) throw ArgumentError("ball_query: k must be positive");
  if (!(radius > 0.0)) throw ArgumentError("ball_query: radius must be positive (inf allowed)");
  const std::size_t n = cloud.size();
  const T* pts = cloud.coords.values().data();
  const T r = static_cast<T>(radius);
  const T rr = std::isinf(r) ? std::numeric_limits<T>::infinity() : r * r;

  GroupIndex gi;
  gi.k = k;
  gi.centroids.assign(centroid_indices.begin(), centroid_indices.end());
  gi.neighbors.assign(gi.centroids.size() * k, 0);
  for (std::size_t c = 0; c < gi.centroids.size(); ++c) {
    const std::size_t ci = gi.centroids[c];
    if (ci >= n) throw ArgumentError("ball_query: centroid index out of range");
    const T* pc = pts + ci * 3;
    std::size_t found = 0;
    for (std::size_t j = 0; j < n && found < k; ++j) {
      if (squared_dist3(pts + j * 3, pc) <= rr) gi.neighbors[c * k + found++] = j;
    }
    const std::size_t pad = found == 0 ? ci : gi.neighbors[c * k];
    for (std::size_t j = found; j < k; ++j) gi.neighbors[c * k + j] = pad;
  }
  return gi;
}

// Assemble per-group rows: each neighbor contributes its offset from the
// centroid followed by its feature row, giving N' x k x (3 + C).
template <typename T>
Tensor<T> group_points(const PointCloud<T>& cloud, const Tensor<T>* features, const GroupIndex& gi) {
  cloud.validate();
  gi.validate(cloud.size());
  const std::size_t c_feat = features ? features->dim(1) : 0;
  if (features) {
    if (features->rank() != 2 || features->dim(0) != cloud.size()) {
      throw DimensionError("group_points: features must be N x C, got " + features->shape_str());
    }
  }
  const std::size_t ng = gi.n_groups(), k = gi.k, width = 3 + c_feat;
  const T* pts = cloud.coords.values().data();
  Tensor<T> out({ng, k, width});
  T* od = out.values().data();
  for (std::size_t g = 0; g < ng; ++g) {
    const T* pc = pts + gi.centroids[g] * 3;
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t idx = gi.at(g, j);
      T* row = od + (g * k + j) * width;
      const T* pj = pts + idx * 3;
      row[0] = pj[0] - pc[0];
      row[1] = pj[1] - pc[1];
      row[2] = pj[2] - pc[2];
      if (features) {
        const T* f = features->values().data() + idx * c_feat;
        std::copy_n(f, c_feat, row + 3);
      }
    }
  }
  return out;
}

// Tape-level grouping: relative coordinates enter as constants, gathered
// features keep their gradient path. Produces the same values as
// group_points on the feature tensor.
template <typename T>
VarId group_points_var(Tape<T>& tape, const PointCloud<T>& cloud, std::optional<VarId> features,
                       const GroupIndex& gi) {
  gi.validate(cloud.size());
  const std::size_t ng = gi.n_groups(), k = gi.k;
  const T* pts = cloud.coords.values().data();
  Tensor<T> rel({ng * k, 3});
  for (std::size_t g = 0; g < ng; ++g) {
    const T* pc = pts + gi.centroids[g] * 3;
    for (std::size_t j = 0; j < k; ++j) {
      const T* pj = pts + gi.at(g, j) * 3;
      T* row = rel.values().data() + (g * k + j) * 3;
      row[0] = pj[0] - pc[0];
      row[1] = pj[1] - pc[1];
      row[2] = pj[2] - pc[2];
    }
  }
  VarId rel_v = tape.constant(std::move(rel));
  std::size_t width = 3;
  VarId flat = rel_v;
  if (features) {
    const Tensor<T>& f = tape.value(*features);
    if (f.rank() != 2 || f.dim(0) != cloud.size()) {
      throw DimensionError("group_points: features must be N x C, got " + f.shape_str());
    }
    VarId gathered = tape.gather_rows(*features, gi.neighbors);
    flat = tape.concat_cols(rel_v, gathered);
    width += f.dim(1);
  }
  return tape.reshape(flat, {ng, k, width});
}

// Inverse-square-distance interpolation plan: each fine point pulls from its
// (up to) three nearest coarse points. A coarse point closer than 1e-10 wins
// the whole weight, so exact matches copy features verbatim.
template <typename T>
struct InterpPlan {
  std::vector<std::size_t> indices;  // n_fine * k
  std::vector<T> weights;            // n_fine * k, each row sums to 1
  std::size_t k = 0;
  std::size_t n_fine = 0;
  std::size_t n_coarse = 0;
};

template <typename T>
InterpPlan<T> three_nn_weights(const Tensor<T>& fine_coords, const Tensor<T>& coarse_coords) {
  if (fine_coords.rank() != 2 || fine_coords.dim(1) != 3 || coarse_coords.rank() != 2 ||
      coarse_coords.dim(1) != 3) {
    throw DimensionError("three_nn_weights: coordinate tensors must be N x 3");
  }
  const std::size_t nf = fine_coords.dim(0), nc = coarse_coords.dim(0);
  const std::size_t k = std::min<std::size_t>(3, nc);
  InterpPlan<T> plan;
  plan.k = k;
  plan.n_fine = nf;
  plan.n_coarse = nc;
  plan.indices.assign(nf * k, 0);
  plan.weights.assign(nf * k, T{0});

  const T* fp = fine_coords.values().data();
  const T* cp = coarse_coords.values().data();
  const T exact = static_cast<T>(1e-10) * static_cast<T>(1e-10);

  std::vector<std::pair<T, std::size_t>> best;
  for (std::size_t i = 0; i < nf; ++i) {
    best.clear();
    for (std::size_t j = 0; j < nc; ++j) {
      best.emplace_back(squared_dist3(fp + i * 3, cp + j * 3), j);
    }
    std::partial_sort(best.begin(), best.begin() + k, best.end());
    std::size_t* idx = plan.indices.data() + i * k;
    T* w = plan.weights.data() + i * k;
    for (std::size_t j = 0; j < k; ++j) idx[j] = best[j].second;
    if (best[0].first < exact) {
      w[0] = T{1};  // coincident coarse point: copy verbatim
      continue;
    }
    T total{};
    for (std::size_t j = 0; j < k; ++j) {
      w[j] = T{1} / best[j].first;
      total += w[j];
    }
    for (std::size_t j = 0; j < k; ++j) w[j] /= total;
  }
  return plan;
}

// out[i] = sum_j plan.weights[i][j] * coarse_feats[plan.indices[i][j]].
template <typename T>
VarId interpolate_var(Tape<T>& tape, VarId coarse_feats, const InterpPlan<T>& plan) {
  const Tensor<T>& f = tape.value(coarse_feats);
  if (f.rank() != 2 || f.dim(0) != plan.n_coarse) {
    throw DimensionError("interpolate: coarse features must be " + std::to_string(plan.n_coarse) +
                         " x C, got " + f.shape_str());
  }
  const std::size_t c = f.dim(1), k = plan.k, nf = plan.n_fine;
  Tensor<T> y({nf, c});
  {
    const T* fd = f.values().data();
    T* yd = y.values().data();
    for (std::size_t i = 0; i < nf; ++i) {
      T* yi = yd + i * c;
      for (std::size_t j = 0; j < k; ++j) {
        const T w = plan.weights[i * k + j];
        const T* fj = fd + plan.indices[i * k + j] * c;
        for (std::size_t m = 0; m < c; ++m) yi[m] += w * fj[m];
      }
    }
  }
  return tape.apply("interpolate", std::move(y), {coarse_feats},
                    [c, k, nf, idx = plan.indices, w = plan.weights](
                        const typename Tape<T>::BackwardCtx& ctx) {
                      if (Tensor<T>* df = ctx.in_grads[0]) {
                        const T* g = ctx.out_grad.values().data();
                        T* d = df->values().data();
                        for (std::size_t i = 0; i < nf; ++i) {
                          const T* gi = g + i * c;
                          for (std::size_t j = 0; j < k; ++j) {
                            T* dj = d + idx[i * k + j] * c;
                            const T wj = w[i * k + j];
                            for (std::size_t m = 0; m < c; ++m) dj[m] += wj * gi[m];
                          }
                        }
                      }
                    });
}

// Parameter helpers shared by every stack of row-wise fully connected layers.
template <typename T>
Tensor<T> glorot_uniform(Rng& rng, std::size_t fan_in, std::size_t fan_out,
                         std::vector<std::size_t> shape) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t.values()[i] = static_cast<T>(rng.uniform(-a, a));
  return t;
}

template <typename T>
void init_mlp(ParamStore<T>& store, Rng& rng, const std::string& prefix, std::size_t in_dim,
              std::span<const std::size_t> widths) {
  if (widths.empty()) throw ArgumentError("init_mlp: empty width list for " + prefix);
  std::size_t prev = in_dim;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const std::string base = prefix + "/fc" + std::to_string(i);
    store[base + "/W"] = glorot_uniform<T>(rng, prev, widths[i], {prev, widths[i]});
    // Small positive bias keeps narrow relu layers (the score head is one
    // unit wide) from starting dead.
    store[base + "/b"] = Tensor<T>::full({widths[i]}, static_cast<T>(0.1));
    prev = widths[i];
  }
}

// Row-shared MLP: linear / relu / linear / ... with no activation after the
// final layer.
template <typename T>
VarId shared_mlp(Tape<T>& tape, const ParamVars& pv, VarId x, std::size_t n_layers,
                 const std::string& prefix) {
  if (n_layers == 0) throw ArgumentError("shared_mlp: need at least one layer");
  VarId h = x;
  for (std::size_t i = 0; i < n_layers; ++i) {
    const std::string base = prefix + "/fc" + std::to_string(i);
    h = tape.linear(h, pv.at(base + "/W"), pv.at(base + "/b"));
    if (i + 1 < n_layers) h = tape.relu(h);
  }
  return h;
}

// One set-abstraction step: sample centroids (or reuse the given ones), group
// neighbors inside the radius, run the shared MLP per neighbor row, then max
// pool each group to a single feature.
struct SagConfig {
  std::size_t n_centroids = 1;
  double radius = 1.0;  // may be infinite
  std::size_t k = 1;
  std::vector<std::size_t> mlp_widths;

  void validate() const {
    if (n_centroids == 0) throw ArgumentError("sag layer: n_centroids must be positive");
    if (!(radius > 0.0)) throw ArgumentError("sag layer: radius must be positive (inf allowed)");
    if (k == 0) throw ArgumentError("sag layer: group size must be positive");
    if (mlp_widths.empty()) throw ArgumentError("sag layer: empty mlp width list");
  }
};

template <typename T>
struct SagResult {
  PointCloud<T> centroids;                    // N' x 3 subcloud
  std::vector<std::size_t> centroid_indices;  // into the input cloud
  VarId features = 0;                         // N' x mlp_widths.back()
};

template <typename T>
SagResult<T> sag_layer(Tape<T>& tape, const ParamVars& pv, const PointCloud<T>& cloud,
                       std::optional<VarId> features, const SagConfig& cfg,
                       std::span<const std::size_t> shared_centroids, const std::string& prefix) {
  cfg.validate();
  if (cfg.n_centroids > cloud.size()) {
    throw ArgumentError("sag layer: n_centroids exceeds cloud size");
  }
  std::vector<std::size_t> centroids;
  if (!shared_centroids.empty()) {
    if (shared_centroids.size() != cfg.n_centroids) {
      throw ArgumentError("sag layer: shared centroid list has wrong length");
    }
    centroids.assign(shared_centroids.begin(), shared_centroids.end());
  } else {
    centroids = farthest_point_sample(cloud, cfg.n_centroids);
  }

  GroupIndex gi = ball_query(cloud, centroids, cfg.radius, cfg.k);
  VarId grouped = group_points_var(tape, cloud, features, gi);
  const std::size_t width = tape.value(grouped).dim(2);
  VarId flat = tape.reshape(grouped, {cfg.n_centroids * cfg.k, width});
  VarId hidden = shared_mlp(tape, pv, flat, cfg.mlp_widths.size(), prefix);
  VarId stacked = tape.reshape(hidden, {cfg.n_centroids, cfg.k, cfg.mlp_widths.back()});
  VarId pooled = tape.set_max_pool(stacked);

  SagResult<T> out;
  out.centroid_indices = centroids;
  Tensor<T> sub({centroids.size(), 3});
  for (std::size_t i = 0; i < centroids.size(); ++i) {
    std::copy_n(cloud.coords.values().data() + centroids[i] * 3, 3,
                sub.values().data() + i * 3);
  }
  out.centroids = PointCloud<T>{std::move(sub), {}};
  out.features = pooled;
  return out;
}

// Feature propagation: interpolate coarse features onto the fine point set,
// concatenate skip features when present, then run the shared MLP.
template <typename T>
VarId fp_layer(Tape<T>& tape, const ParamVars& pv, const Tensor<T>& fine_coords,
               const Tensor<T>& coarse_coords, VarId coarse_feats, std::optional<VarId> skip_feats,
               std::size_t n_layers, const std::string& prefix) {
  InterpPlan<T> plan = three_nn_weights(fine_coords, coarse_coords);
  VarId h = interpolate_var(tape, coarse_feats, plan);
  if (skip_feats) h = tape.concat_cols(h, *skip_feats);
  return shared_mlp(tape, pv, h, n_layers, prefix);
}

}  // namespace pcan
