#pragma once

#include <string>
#include <vector>

#include "pcan/point_ops.hpp"
#include "pcan/tape.hpp"

namespace pcan {

// Cluster-residual aggregation head. Descriptor width is fixed at 256.
struct VladConfig {
  std::size_t clusters = 8;
  std::size_t feature_dim = 64;
  static constexpr std::size_t output_dim = 256;

  void validate() const {
    if (clusters == 0) throw ArgumentError("vlad: cluster count must be positive");
    if (feature_dim == 0) throw ArgumentError("vlad: feature dim must be positive");
  }
};

template <typename T>
void init_vlad(ParamStore<T>& store, Rng& rng, const VladConfig& cfg, const std::string& prefix) {
  cfg.validate();
  Tensor<T> clusters({cfg.clusters, cfg.feature_dim});
  for (std::size_t i = 0; i < clusters.size(); ++i) {
    clusters.values()[i] = static_cast<T>(rng.uniform(-0.5, 0.5));
  }
  store[prefix + "/clusters"] = std::move(clusters);
  store[prefix + "/assign/W"] =
      glorot_uniform<T>(rng, cfg.feature_dim, cfg.clusters, {cfg.feature_dim, cfg.clusters});
  store[prefix + "/assign/b"] = Tensor<T>({cfg.clusters});
  store[prefix + "/proj/W"] = glorot_uniform<T>(rng, cfg.clusters * cfg.feature_dim,
                                                VladConfig::output_dim,
                                                {cfg.clusters * cfg.feature_dim, VladConfig::output_dim});
  store[prefix + "/proj/b"] = Tensor<T>({VladConfig::output_dim});
}

// Softmax cluster responsibilities, one row per feature row.
template <typename T>
VarId soft_assign(Tape<T>& tape, const ParamVars& pv, VarId feats, const std::string& prefix) {
  VarId logits = tape.linear(feats, pv.at(prefix + "/assign/W"), pv.at(prefix + "/assign/b"));
  return tape.softmax_rows(logits);
}

// V[k] = sum_l s[l] * a[l][k] * (f[l] - c[k]), accumulated in ascending l so
// the sum order is canonical. A fused op keeps the four gradients in one
// place.
template <typename T>
VarId weighted_residual_sum(Tape<T>& tape, VarId feats, VarId assign, VarId attn, VarId clusters) {
  const Tensor<T>& f = tape.value(feats);
  const Tensor<T>& a = tape.value(assign);
  const Tensor<T>& s = tape.value(attn);
  const Tensor<T>& c = tape.value(clusters);
  if (f.rank() != 2 || c.rank() != 2 || f.dim(1) != c.dim(1)) {
    throw DimensionError("weighted_residual_sum: features " + f.shape_str() +
                         " incompatible with clusters " + c.shape_str());
  }
  const std::size_t n = f.dim(0), d = f.dim(1), k = c.dim(0);
  if (a.rank() != 2 || a.dim(0) != n || a.dim(1) != k) {
    throw DimensionError("weighted_residual_sum: assignment must be " + std::to_string(n) + " x " +
                         std::to_string(k) + ", got " + a.shape_str());
  }
  if (s.size() != n) {
    throw DimensionError("weighted_residual_sum: need one attention weight per feature row, got " +
                         s.shape_str());
  }
  Tensor<T> v({k, d});
  {
    const T* fd = f.values().data();
    const T* ad = a.values().data();
    const T* sd = s.values().data();
    const T* cd = c.values().data();
    T* vd = v.values().data();
    for (std::size_t l = 0; l < n; ++l) {
      const T sl = sd[l];
      const T* fl = fd + l * d;
      for (std::size_t ki = 0; ki < k; ++ki) {
        const T w = sl * ad[l * k + ki];
        const T* ck = cd + ki * d;
        T* vk = vd + ki * d;
        for (std::size_t di = 0; di < d; ++di) vk[di] += w * (fl[di] - ck[di]);
      }
    }
  }
  return tape.apply(
      "weighted_residual_sum", std::move(v), {feats, assign, attn, clusters},
      [n, d, k](const typename Tape<T>::BackwardCtx& ctx) {
        const T* g = ctx.out_grad.values().data();
        const T* fd = ctx.in_values[0]->values().data();
        const T* ad = ctx.in_values[1]->values().data();
        const T* sd = ctx.in_values[2]->values().data();
        const T* cd = ctx.in_values[3]->values().data();
        Tensor<T>* dfT = ctx.in_grads[0];
        Tensor<T>* daT = ctx.in_grads[1];
        Tensor<T>* dsT = ctx.in_grads[2];
        Tensor<T>* dcT = ctx.in_grads[3];
        T* df = dfT ? dfT->values().data() : nullptr;
        T* da = daT ? daT->values().data() : nullptr;
        T* ds = dsT ? dsT->values().data() : nullptr;
        T* dc = dcT ? dcT->values().data() : nullptr;
        for (std::size_t l = 0; l < n; ++l) {
          const T sl = sd[l];
          const T* fl = fd + l * d;
          T ds_acc{};
          for (std::size_t ki = 0; ki < k; ++ki) {
            const T alk = ad[l * k + ki];
            const T* ck = cd + ki * d;
            const T* gk = g + ki * d;
            T resid_dot{};
            for (std::size_t di = 0; di < d; ++di) {
              resid_dot += (fl[di] - ck[di]) * gk[di];
            }
            if (df) {
              const T w = sl * alk;
              T* dfl = df + l * d;
              for (std::size_t di = 0; di < d; ++di) dfl[di] += w * gk[di];
            }
            if (da) da[l * k + ki] += sl * resid_dot;
            ds_acc += alk * resid_dot;
            if (dc) {
              const T w = sl * alk;
              T* dck = dc + ki * d;
              for (std::size_t di = 0; di < d; ++di) dck[di] -= w * gk[di];
            }
          }
          if (ds) ds[l] += ds_acc;
        }
      });
}

// Attention-weighted aggregation over learned clusters.
template <typename T>
VarId attention_vlad(Tape<T>& tape, const ParamVars& pv, VarId feats, VarId attn,
                     const std::string& prefix) {
  VarId assign = soft_assign(tape, pv, feats, prefix);
  return weighted_residual_sum(tape, feats, assign, attn, pv.at(prefix + "/clusters"));
}

// Unweighted aggregation is the same code path with unit weights.
template <typename T>
VarId plain_vlad(Tape<T>& tape, const ParamVars& pv, VarId feats, const std::string& prefix) {
  const std::size_t n = tape.value(feats).dim(0);
  VarId ones = tape.constant(Tensor<T>::full({n, 1}, T{1}));
  return attention_vlad(tape, pv, feats, ones, prefix);
}

// Intra-normalize each cluster row, flatten cluster-major, project to the
// fixed output width, then L2-normalize. A projection that lands exactly on
// zero cannot be normalized and signals degenerate parameters.
template <typename T>
VarId compact_descriptor(Tape<T>& tape, const ParamVars& pv, VarId vlad, const std::string& prefix) {
  const Tensor<T>& v = tape.value(vlad);
  if (v.rank() != 2) throw DimensionError("compact_descriptor: expected K x D, got " + v.shape_str());
  const std::size_t k = v.dim(0), d = v.dim(1);
  VarId intra = tape.l2_normalize_rows(vlad);
  VarId flat = tape.reshape(intra, {1, k * d});
  VarId proj = tape.linear(flat, pv.at(prefix + "/proj/W"), pv.at(prefix + "/proj/b"));
  T norm{};
  for (T x : tape.value(proj).values()) norm += x * x;
  if (norm == T{0}) {
    throw NormalizationError("compact_descriptor: projected vector is exactly zero");
  }
  VarId unit = tape.l2_normalize_rows(proj);
  return tape.reshape(unit, {VladConfig::output_dim});
}

}  // namespace pcan
