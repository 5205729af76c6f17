#pragma once

#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "pcan/point_ops.hpp"
#include "pcan/tape.hpp"

namespace pcan {

// Multi-scale contextual attention head. A shared centroid set feeds one to
// three grouping scales; their concatenated features collapse through a
// single global group, then propagate back out to every input point and end
// in a per-point score in (0, 1).
struct AttentionConfig {
  std::size_t msg_scales = 3;  // how many of the per-scale configs are active
  std::size_t n_centroids = 256;
  std::vector<SagConfig> scales;            // size 3; n_centroids fields follow n_centroids
  std::vector<std::size_t> accum_mlp{256, 512};
  std::vector<std::size_t> fp1_widths{256, 128};
  std::vector<std::size_t> fp2_widths{128, 128};
  std::vector<std::size_t> fc_widths{1, 1};

  AttentionConfig() {
    scales.resize(3);
    scales[0] = SagConfig{256, 0.1, 16, {16, 16, 32}};
    scales[1] = SagConfig{256, 0.2, 32, {32, 32, 64}};
    scales[2] = SagConfig{256, 0.4, 64, {32, 64, 64}};
  }

  std::size_t concat_dim() const {
    std::size_t d = 0;
    for (std::size_t i = 0; i < msg_scales; ++i) d += scales[i].mlp_widths.back();
    return d;
  }

  void validate() const {
    if (msg_scales < 1 || msg_scales > 3) {
      throw ArgumentError("attention: msg_scales must be 1, 2, or 3");
    }
    if (scales.size() != 3) throw ArgumentError("attention: exactly three scale configs expected");
    if (n_centroids == 0) throw ArgumentError("attention: centroid count must be positive");
    for (std::size_t i = 0; i < msg_scales; ++i) scales[i].validate();
    if (accum_mlp.empty() || fp1_widths.empty() || fp2_widths.empty() || fc_widths.empty()) {
      throw ArgumentError("attention: empty width list");
    }
  }
};

// Shapes of the named intermediates, for auditing.
struct AttentionTrace {
  std::vector<std::pair<std::string, std::vector<std::size_t>>> shapes;
};

template <typename T>
void init_attention(ParamStore<T>& store, Rng& rng, const AttentionConfig& cfg,
                    std::size_t local_dim, const std::string& prefix) {
  cfg.validate();
  for (std::size_t i = 0; i < cfg.msg_scales; ++i) {
    init_mlp(store, rng, prefix + "/sag" + std::to_string(i + 1), 3 + local_dim,
             cfg.scales[i].mlp_widths);
  }
  const std::size_t cat = cfg.concat_dim();
  init_mlp(store, rng, prefix + "/accum", 3 + cat, cfg.accum_mlp);
  init_mlp(store, rng, prefix + "/fp1", cfg.accum_mlp.back() + cat, cfg.fp1_widths);
  init_mlp(store, rng, prefix + "/fp2", cfg.fp1_widths.back() + local_dim, cfg.fp2_widths);
  init_mlp(store, rng, prefix + "/fc", cfg.fp2_widths.back(), cfg.fc_widths);
}

// Per-point attention scores (N x 1), each strictly inside (0, 1).
template <typename T>
VarId compute_attention(Tape<T>& tape, const ParamVars& pv, const PointCloud<T>& cloud,
                        VarId local_feats, const AttentionConfig& cfg, const std::string& prefix,
                        AttentionTrace* trace = nullptr) {
  cfg.validate();
  const Tensor<T>& lf = tape.value(local_feats);
  if (lf.rank() != 2 || lf.dim(0) != cloud.size()) {
    throw DimensionError("compute_attention: local features must be N x D, got " + lf.shape_str());
  }
  if (cfg.n_centroids > cloud.size()) {
    throw ArgumentError("compute_attention: more centroids than points");
  }
  auto record = [&](const char* name, VarId v) {
    if (trace) trace->shapes.emplace_back(name, tape.value(v).shape());
  };

  // One centroid set shared by every scale, so the scales describe the same
  // physical locations.
  std::vector<std::size_t> shared = farthest_point_sample(cloud, cfg.n_centroids);

  std::optional<VarId> cat;
  PointCloud<T> centroid_cloud;
  for (std::size_t i = 0; i < cfg.msg_scales; ++i) {
    SagConfig sc = cfg.scales[i];
    sc.n_centroids = cfg.n_centroids;
    SagResult<T> res = sag_layer(tape, pv, cloud, local_feats, sc, shared,
                                 prefix + "/sag" + std::to_string(i + 1));
    record(("sag" + std::to_string(i + 1)).c_str(), res.features);
    cat = cat ? tape.concat_cols(*cat, res.features) : res.features;
    if (i == 0) centroid_cloud = std::move(res.centroids);
  }
  record("concat", *cat);

  SagConfig accum;
  accum.n_centroids = 1;
  accum.radius = std::numeric_limits<double>::infinity();
  accum.k = cfg.n_centroids;
  accum.mlp_widths = cfg.accum_mlp;
  SagResult<T> global = sag_layer(tape, pv, centroid_cloud, cat, accum, {}, prefix + "/accum");
  record("accum", global.features);

  VarId fp1 = fp_layer(tape, pv, centroid_cloud.coords, global.centroids.coords, global.features,
                       cat, cfg.fp1_widths.size(), prefix + "/fp1");
  record("fp1", fp1);

  VarId fp2 = fp_layer(tape, pv, cloud.coords, centroid_cloud.coords, fp1, local_feats,
                       cfg.fp2_widths.size(), prefix + "/fp2");
  record("fp2", fp2);

  VarId logits = shared_mlp(tape, pv, fp2, cfg.fc_widths.size(), prefix + "/fc");
  VarId scores = tape.sigmoid(logits);
  record("scores", scores);
  return scores;
}

// Direct per-point reweighting (row l scaled by its score). Kept separate
// from the aggregation path, which applies the scores inside the cluster sum
// instead.
template <typename T>
VarId reweight_features(Tape<T>& tape, VarId feats, VarId attn) {
  const Tensor<T>& f = tape.value(feats);
  const Tensor<T>& s = tape.value(attn);
  if (f.rank() != 2 || s.size() != f.dim(0)) {
    throw DimensionError("reweight_features: features " + f.shape_str() +
                         " need one score per row, got " + s.shape_str());
  }
  return tape.scale_rows(feats, attn);
}

}  // namespace pcan
