#pragma once

#include <string>

#include "pcan/attention.hpp"
#include "pcan/backbone.hpp"
#include "pcan/point_ops.hpp"
#include "pcan/rng.hpp"
#include "pcan/tape.hpp"
#include "pcan/vlad.hpp"

namespace pcan {

// With attention forced to one the aggregation degenerates to the plain
// cluster-residual sum; that mode doubles as the ablation baseline.
enum class AttentionMode { learned, constant_one };

struct ModelConfig {
  BackboneConfig backbone;
  AttentionConfig attention;
  VladConfig vlad;
  AttentionMode attention_mode = AttentionMode::learned;

  void validate() const {
    backbone.validate();
    attention.validate();
    VladConfig v = vlad;
    v.feature_dim = backbone.feature_dim();
    v.validate();
  }
};

// Full pipeline: per-point features, contextual scores, score-weighted
// cluster aggregation, compact unit-norm descriptor.
template <typename T>
struct PcanModel {
  ModelConfig cfg;
  ParamStore<T> params;

  void init(Rng& rng) {
    cfg.vlad.feature_dim = cfg.backbone.feature_dim();
    cfg.validate();
    params.clear();
    init_backbone(params, rng, cfg.backbone, "backbone");
    init_attention(params, rng, cfg.attention, cfg.backbone.feature_dim(), "attn");
    init_vlad(params, rng, cfg.vlad, "vlad");
  }

  VarId attention_scores(Tape<T>& tape, const ParamVars& pv, const PointCloud<T>& cloud,
                         VarId local_feats, AttentionTrace* trace = nullptr) const {
    if (cfg.attention_mode == AttentionMode::constant_one) {
      return tape.constant(Tensor<T>::full({cloud.size(), 1}, T{1}));
    }
    return compute_attention(tape, pv, cloud, local_feats, cfg.attention, "attn", trace);
  }

  // Descriptor as a tape variable (shape {256}).
  VarId forward(Tape<T>& tape, const ParamVars& pv, const PointCloud<T>& cloud,
                AttentionTrace* trace = nullptr) const {
    VarId feats = extract_local_features(tape, pv, cloud, cfg.backbone, "backbone");
    VarId scores = attention_scores(tape, pv, cloud, feats, trace);
    VarId vlad = attention_vlad(tape, pv, feats, scores, "vlad");
    return compact_descriptor(tape, pv, vlad, "vlad");
  }

  Tensor<T> descriptor(const PointCloud<T>& cloud, AttentionTrace* trace = nullptr) const {
    Tape<T> tape;
    ParamVars pv = tape.register_params(params);
    return tape.value(forward(tape, pv, cloud, trace));
  }

  // Per-point scores as plain values (N x 1).
  Tensor<T> attention_map(const PointCloud<T>& cloud) const {
    Tape<T> tape;
    ParamVars pv = tape.register_params(params);
    VarId feats = extract_local_features(tape, pv, cloud, cfg.backbone, "backbone");
    return tape.value(attention_scores(tape, pv, cloud, feats));
  }
};

}  // namespace pcan
