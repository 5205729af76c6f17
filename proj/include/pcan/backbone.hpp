#pragma once

#include <string>
#include <vector>

#include "pcan/point_ops.hpp"
#include "pcan/tape.hpp"

namespace pcan {

// Per-point feature extractor: five row-shared fully connected layers with
// ReLU between them (none after the last), plus two optional alignment
// transforms. No batch normalization anywhere; layers stay well scaled
// through their initialization instead.
struct BackboneConfig {
  std::vector<std::size_t> mlp_widths{64, 64, 64, 128, 64};
  bool use_input_tnet = false;
  bool use_feature_tnet = false;  // applied after the third layer
  std::vector<std::size_t> tnet_mlp_widths{32, 64};
  std::vector<std::size_t> tnet_fc_widths{32};

  std::size_t feature_dim() const { return mlp_widths.back(); }

  void validate() const {
    if (mlp_widths.size() != 5) {
      throw ArgumentError("backbone: exactly five shared layer widths required");
    }
    for (std::size_t w : mlp_widths) {
      if (w == 0) throw ArgumentError("backbone: zero layer width");
    }
    if (tnet_mlp_widths.empty() || tnet_fc_widths.empty()) {
      throw ArgumentError("backbone: transform net width lists must be non-empty");
    }
  }
};

template <typename T>
void init_tnet(ParamStore<T>& store, Rng& rng, const BackboneConfig& cfg, std::size_t dim,
               const std::string& prefix) {
  init_mlp(store, rng, prefix + "/mlp", dim, cfg.tnet_mlp_widths);
  init_mlp(store, rng, prefix + "/head", cfg.tnet_mlp_widths.back(), cfg.tnet_fc_widths);
  // The last layer starts at zero so the predicted transform begins as the
  // exact identity.
  store[prefix + "/out/W"] = Tensor<T>({cfg.tnet_fc_widths.back(), dim * dim});
  store[prefix + "/out/b"] = Tensor<T>({dim * dim});
}

template <typename T>
void init_backbone(ParamStore<T>& store, Rng& rng, const BackboneConfig& cfg,
                   const std::string& prefix) {
  cfg.validate();
  if (cfg.use_input_tnet) init_tnet(store, rng, cfg, 3, prefix + "/tnet_in");
  if (cfg.use_feature_tnet) init_tnet(store, rng, cfg, cfg.mlp_widths[2], prefix + "/tnet_feat");
  init_mlp(store, rng, prefix + "/mlp", 3, cfg.mlp_widths);
}

// Predict a dim x dim alignment transform from the rows of x: shared MLP,
// max pool over all rows, FC stack, then identity plus a learned residual.
template <typename T>
VarId tnet(Tape<T>& tape, const ParamVars& pv, VarId x, std::size_t dim,
           const BackboneConfig& cfg, const std::string& prefix) {
  const Tensor<T>& xv = tape.value(x);
  if (xv.rank() != 2 || xv.dim(1) != dim) {
    throw DimensionError("tnet: expected N x " + std::to_string(dim) + ", got " + xv.shape_str());
  }
  const std::size_t n = xv.dim(0);
  VarId h = shared_mlp(tape, pv, x, cfg.tnet_mlp_widths.size(), prefix + "/mlp");
  h = tape.reshape(h, {1, n, cfg.tnet_mlp_widths.back()});
  h = tape.set_max_pool(h);  // 1 x hidden
  h = tape.relu(h);
  h = shared_mlp(tape, pv, h, cfg.tnet_fc_widths.size(), prefix + "/head");
  h = tape.relu(h);
  h = tape.linear(h, pv.at(prefix + "/out/W"), pv.at(prefix + "/out/b"));
  VarId residual = tape.reshape(h, {dim, dim});
  VarId eye = tape.constant(Tensor<T>::identity(dim));
  return tape.add(eye, residual);
}

// Cloud coordinates to one feature row per point (N x D).
template <typename T>
VarId extract_local_features(Tape<T>& tape, const ParamVars& pv, const PointCloud<T>& cloud,
                             const BackboneConfig& cfg, const std::string& prefix) {
  cfg.validate();
  cloud.validate();
  VarId x = tape.constant(cloud.coords);
  if (cfg.use_input_tnet) {
    VarId t = tnet(tape, pv, x, 3, cfg, prefix + "/tnet_in");
    x = tape.matmul(x, t);
  }
  for (std::size_t i = 0; i < cfg.mlp_widths.size(); ++i) {
    const std::string base = prefix + "/mlp/fc" + std::to_string(i);
    x = tape.linear(x, pv.at(base + "/W"), pv.at(base + "/b"));
    if (i + 1 < cfg.mlp_widths.size()) x = tape.relu(x);
    if (i == 2 && cfg.use_feature_tnet) {
      VarId t = tnet(tape, pv, x, cfg.mlp_widths[2], cfg, prefix + "/tnet_feat");
      x = tape.matmul(x, t);
    }
  }
  return x;
}

}  // namespace pcan
