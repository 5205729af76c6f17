#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "pcan/checkpoint.hpp"
#include "pcan/dataset.hpp"
#include "pcan/errors.hpp"
#include "pcan/loss.hpp"
#include "pcan/model.hpp"
#include "pcan/retrieval.hpp"
#include "pcan/rng.hpp"
#include "pcan/threading.hpp"

namespace pcan {

struct TrainConfig {
  double lr = 1e-3;
  std::string optimizer = "adam";  // "adam" or "sgd"
  std::size_t epochs = 10;
  std::size_t tuples_per_step = 4;
  std::uint64_t seed = 7;
  std::string precision = "f64";  // "f32" or "f64"
  std::size_t checkpoint_every = 0;  // epochs between snapshots; 0 = final only
  std::string resume_from;           // checkpoint to continue from; "" = fresh
  std::size_t n_threads = 1;

  // lr == 0 is allowed as a diagnostic no-op run.
  void validate() const {
    if (lr < 0) throw ArgumentError("train: learning rate must be non-negative");
    if (epochs == 0) throw ArgumentError("train: epochs must be >= 1");
    if (tuples_per_step == 0) throw ArgumentError("train: tuples_per_step must be >= 1");
    if (optimizer != "adam" && optimizer != "sgd") {
      throw ArgumentError("train: unknown optimizer '" + optimizer + "'");
    }
    if (precision != "f32" && precision != "f64") {
      throw ArgumentError("train: unknown precision '" + precision + "'");
    }
  }
};

template <typename T>
struct AdamState {
  ParamStore<T> m;
  ParamStore<T> v;
  std::map<std::string, std::uint64_t> t;

  void reset(const ParamStore<T>& params) {
    m.clear();
    v.clear();
    t.clear();
    for (const auto& [name, p] : params) {
      m.emplace(name, Tensor<T>::zeros(p.shape()));
      v.emplace(name, Tensor<T>::zeros(p.shape()));
      t.emplace(name, 0);
    }
  }
};

template <typename T>
bool all_zero(const Tensor<T>& t) {
  for (T v : t.values()) {
    if (v != T{0}) return false;
  }
  return true;
}

// One optimizer step. Tensors whose gradient is identically zero are left
// untouched — including their moment estimates and step counters — so
// unused parameters never drift.
template <typename T>
void apply_updates(ParamStore<T>& params, const ParamStore<T>& grads, AdamState<T>& opt,
                   const TrainConfig& cfg) {
  const T lr = static_cast<T>(cfg.lr);
  const T b1 = static_cast<T>(0.9);
  const T b2 = static_cast<T>(0.999);
  const T eps = static_cast<T>(1e-8);

  for (const auto& [name, g] : grads) {
    auto pit = params.find(name);
    if (pit == params.end()) throw ContractError("update for unknown parameter " + name);
    if (all_zero(g)) continue;
    Tensor<T>& p = pit->second;
    if (!p.same_shape(g)) throw DimensionError("gradient shape mismatch for " + name);

    if (cfg.optimizer == "sgd") {
      auto pv = p.values();
      auto gv = g.values();
      for (std::size_t i = 0; i < pv.size(); ++i) pv[i] -= lr * gv[i];
      continue;
    }

    Tensor<T>& m = opt.m.at(name);
    Tensor<T>& v = opt.v.at(name);
    std::uint64_t& t = opt.t.at(name);
    ++t;
    const T bc1 = T{1} - static_cast<T>(std::pow(static_cast<double>(b1), static_cast<double>(t)));
    const T bc2 = T{1} - static_cast<T>(std::pow(static_cast<double>(b2), static_cast<double>(t)));
    auto pv = p.values();
    auto gv = g.values();
    auto mv = m.values();
    auto vv = v.values();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      mv[i] = b1 * mv[i] + (T{1} - b1) * gv[i];
      vv[i] = b2 * vv[i] + (T{1} - b2) * gv[i] * gv[i];
      const T mhat = mv[i] / bc1;
      const T vhat = vv[i] / bc2;
      pv[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// Loss and parameter gradients for one tuple, on its own tape. Pure in the
// parameters, so tuples can be evaluated concurrently and reduced in a fixed
// order without changing the result.
template <typename T>
struct TupleGrad {
  T loss{};
  ParamStore<T> grads;
};

template <typename T>
TupleGrad<T> tuple_loss_grad(const PcanModel<T>& model, const std::vector<PointCloud<T>>& clouds,
                             const TrainingTuple& tup, const LossConfig& loss_cfg) {
  Tape<T> tape;
  ParamVars pv = tape.register_params(model.params);
  VarId anchor = model.forward(tape, pv, clouds[tup.anchor]);
  std::vector<VarId> pos, neg;
  pos.reserve(tup.positives.size());
  neg.reserve(tup.negatives.size());
  for (std::size_t i : tup.positives) pos.push_back(model.forward(tape, pv, clouds[i]));
  for (std::size_t i : tup.negatives) neg.push_back(model.forward(tape, pv, clouds[i]));
  VarId other = model.forward(tape, pv, clouds[tup.other_negative]);
  VarId loss = lazy_quadruplet_loss_var<T>(tape, anchor, pos, neg, other, loss_cfg);

  TupleGrad<T> out;
  out.loss = tape.scalar(loss);
  tape.backward(loss);
  out.grads = tape.parameter_gradients();
  return out;
}

struct TrainResult {
  std::filesystem::path checkpoint_path;
  std::filesystem::path loss_log_path;
  std::vector<double> epoch_losses;  // full history including resumed epochs
  std::size_t n_tuples = 0;
};

namespace detail {

inline std::string format_loss_line(std::size_t epoch, double loss) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%zu\t%.12g\n", epoch, loss);
  return buf;
}

inline std::string serialize_step_counts(const std::map<std::string, std::uint64_t>& t) {
  std::string out;
  for (const auto& [name, count] : t) {
    out += name;
    out += '\t';
    out += std::to_string(count);
    out += '\n';
  }
  return out;
}

inline std::map<std::string, std::uint64_t> parse_step_counts(const std::string& text) {
  std::map<std::string, std::uint64_t> t;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::string line = text.substr(pos, nl == std::string::npos ? nl : nl - pos);
    pos = nl == std::string::npos ? text.size() : nl + 1;
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError("optimizer step record malformed");
    t[line.substr(0, tab)] = std::stoull(line.substr(tab + 1));
  }
  return t;
}

}  // namespace detail

// Builds the checkpoint payload: parameters, optimizer state, counters, rng
// stream, loss history, and the caller-provided config snapshot.
template <typename T>
Checkpoint<T> make_checkpoint(const PcanModel<T>& model, const AdamState<T>& opt,
                              const Rng& rng, std::size_t epochs_done,
                              const std::string& history, const std::string& config_snapshot) {
  Checkpoint<T> ckpt;
  for (const auto& [name, tns] : model.params) ckpt.tensors.emplace(name, tns);
  for (const auto& [name, tns] : opt.m) ckpt.tensors.emplace("opt/m/" + name, tns);
  for (const auto& [name, tns] : opt.v) ckpt.tensors.emplace("opt/v/" + name, tns);
  ckpt.texts.emplace("opt/t", detail::serialize_step_counts(opt.t));
  ckpt.texts.emplace("rng", rng.save_state());
  ckpt.texts.emplace("epoch", std::to_string(epochs_done));
  ckpt.texts.emplace("history", history);
  ckpt.texts.emplace("config", config_snapshot);
  return ckpt;
}

// Splits a checkpoint back into model/optimizer/rng state. The parameter set
// must exactly match what the model config expects.
template <typename T>
void restore_checkpoint(const Checkpoint<T>& ckpt, PcanModel<T>& model, AdamState<T>& opt,
                        Rng& rng, std::size_t& epochs_done, std::string& history) {
  ParamStore<T> params, m, v;
  for (const auto& [name, tns] : ckpt.tensors) {
    if (name.starts_with("opt/m/")) {
      m.emplace(name.substr(6), tns);
    } else if (name.starts_with("opt/v/")) {
      v.emplace(name.substr(6), tns);
    } else {
      params.emplace(name, tns);
    }
  }
  model.params = std::move(params);
  opt.m = std::move(m);
  opt.v = std::move(v);
  opt.t = detail::parse_step_counts(ckpt.texts.at("opt/t"));
  rng.restore_state(ckpt.texts.at("rng"));
  epochs_done = static_cast<std::size_t>(std::stoull(ckpt.texts.at("epoch")));
  history = ckpt.texts.at("history");
}

template <typename T>
TrainResult train_impl(const std::vector<Submap>& maps, const ModelConfig& model_cfg,
                       const TrainConfig& cfg, const MiningConfig& mining_cfg,
                       const LossConfig& loss_cfg, const std::filesystem::path& out_dir,
                       const std::string& config_snapshot) {
  cfg.validate();
  mining_cfg.validate();
  loss_cfg.validate();
  std::filesystem::create_directories(out_dir);

  const auto refs = submap_refs(maps);
  MiningResult mined = mine_tuples(refs, mining_cfg, cfg.seed);
  if (mined.tuples.empty()) {
    throw ArgumentError("train: mining produced no tuples (skipped " +
                        std::to_string(mined.skipped_no_positive) + " without positives, " +
                        std::to_string(mined.skipped_no_negative) + " without negatives, " +
                        std::to_string(mined.skipped_no_other) + " without a second negative)");
  }

  std::vector<PointCloud<T>> clouds;
  clouds.reserve(maps.size());
  for (const auto& m : maps) clouds.push_back(cloud_cast<T>(m.cloud));

  PcanModel<T> model;
  model.cfg = model_cfg;
  AdamState<T> opt;
  Rng rng(cfg.seed);
  std::size_t epochs_done = 0;
  std::string history;

  if (cfg.resume_from.empty()) {
    model.init(rng);
    opt.reset(model.params);
  } else {
    const Checkpoint<T> ckpt = load_checkpoint<T>(cfg.resume_from);
    model.cfg.validate();
    restore_checkpoint(ckpt, model, opt, rng, epochs_done, history);
    if (epochs_done >= cfg.epochs) {
      throw ArgumentError("train: checkpoint already covers " + std::to_string(epochs_done) +
                          " epochs, nothing to do for epochs=" + std::to_string(cfg.epochs));
    }
  }

  TrainResult res;
  res.n_tuples = mined.tuples.size();
  res.checkpoint_path = out_dir / "model.ckpt";
  res.loss_log_path = out_dir / "loss.tsv";

  for (std::size_t epoch = epochs_done; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(mined.tuples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.tuples_per_step) {
      const std::size_t batch = std::min(cfg.tuples_per_step, order.size() - start);
      std::vector<TupleGrad<T>> results(batch);
      parallel_for(batch, cfg.n_threads, [&](std::size_t b) {
        results[b] = tuple_loss_grad(model, clouds, mined.tuples[order[start + b]], loss_cfg);
      });

      ParamStore<T> acc;
      for (const auto& [name, p] : model.params) acc.emplace(name, Tensor<T>::zeros(p.shape()));
      for (const auto& r : results) {
        loss_sum += static_cast<double>(r.loss);
        for (const auto& [name, g] : r.grads) {
          auto dst = acc.at(name).values();
          auto src = g.values();
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
      }
      const T scale = T{1} / static_cast<T>(batch);
      for (auto& [name, g] : acc) {
        for (T& v : g.values()) v *= scale;
      }
      apply_updates(model.params, acc, opt, cfg);
    }

    const double mean_loss = loss_sum / static_cast<double>(mined.tuples.size());
    res.epoch_losses.push_back(mean_loss);
    history += detail::format_loss_line(epoch + 1, mean_loss);

    const bool snapshot =
        cfg.checkpoint_every > 0 && (epoch + 1 - epochs_done) % cfg.checkpoint_every == 0;
    if (snapshot && epoch + 1 < cfg.epochs) {
      save_checkpoint(res.checkpoint_path,
                      make_checkpoint(model, opt, rng, epoch + 1, history, config_snapshot));
    }
  }

  save_checkpoint(res.checkpoint_path,
                  make_checkpoint(model, opt, rng, cfg.epochs, history, config_snapshot));
  {
    std::ofstream os(res.loss_log_path);
    if (!os) throw IoError("cannot open " + res.loss_log_path.string() + " for writing");
    os << history;
    if (!os) throw IoError("write failed: " + res.loss_log_path.string());
  }

  // Rebuild the full loss history for the caller (resumed runs included).
  if (res.epoch_losses.size() < cfg.epochs) {
    std::vector<double> full;
    std::size_t pos = 0;
    while (pos < history.size()) {
      const std::size_t tab = history.find('\t', pos);
      const std::size_t nl = history.find('\n', pos);
      if (tab == std::string::npos || nl == std::string::npos) break;
      full.push_back(std::stod(history.substr(tab + 1, nl - tab - 1)));
      pos = nl + 1;
    }
    res.epoch_losses = std::move(full);
  }
  return res;
}

}  // namespace pcan
