// Command-line front end: dataset synthesis, training, embedding, retrieval
// evaluation, attention export, and a finite-difference self-check.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pcan/checkpoint.hpp"
#include "pcan/config.hpp"
#include "pcan/dataset.hpp"
#include "pcan/errors.hpp"
#include "pcan/gradcheck.hpp"
#include "pcan/model.hpp"
#include "pcan/ply.hpp"
#include "pcan/retrieval.hpp"
#include "pcan/train.hpp"

namespace {

using namespace pcan;

// Exit codes: 0 ok, 3 configuration, 4 missing/unreadable file, 5 malformed
// content, 1 everything else. Errors are one line on stderr.
int fail(const char* cls, const std::string& msg, int code) {
  std::string line = msg;
  for (char& c : line) {
    if (c == '\n') c = ' ';
  }
  std::cerr << "error: " << cls << ": " << line << "\n";
  return code;
}

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    return fail("ConfigError", e.what(), 3);
  } catch (const IoError& e) {
    return fail("IoError", e.what(), 4);
  } catch (const FormatError& e) {
    return fail("FormatError", e.what(), 5);
  } catch (const DimensionError& e) {
    return fail("DimensionError", e.what(), 1);
  } catch (const ArgumentError& e) {
    return fail("ArgumentError", e.what(), 1);
  } catch (const ValidationError& e) {
    return fail("ValidationError", e.what(), 1);
  } catch (const NormalizationError& e) {
    return fail("NormalizationError", e.what(), 1);
  } catch (const NonFiniteError& e) {
    return fail("NonFiniteError", e.what(), 1);
  } catch (const CheckError& e) {
    return fail("CheckError", e.what(), 1);
  } catch (const CorruptionError& e) {
    return fail("CorruptionError", e.what(), 1);
  } catch (const ContractError& e) {
    return fail("ContractError", e.what(), 1);
  } catch (const std::exception& e) {
    return fail("Error", e.what(), 1);
  }
}

RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& sets) {
  RunConfig cfg = config_path.empty() ? RunConfig{} : parse_config_file(config_path);
  for (const auto& s : sets) apply_override(cfg, s);
  return cfg;
}

void log_config(const RunConfig& cfg) {
  std::cout << "# resolved configuration\n" << dump_config(cfg) << "\n";
}

std::string resolve_out(const std::string& flag, const char* default_name) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("PCAN_OUT_DIR")) {
    std::string base = env;
    if (default_name == nullptr) return base;
    return base + "/" + default_name;
  }
  throw ConfigError("--out required (or set PCAN_OUT_DIR)");
}

std::size_t resolve_threads(std::size_t flag) {
  if (flag > 0) return flag;
  if (const char* env = std::getenv("PCAN_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
    throw ConfigError("PCAN_THREADS must be a positive integer");
  }
  return 1;
}

// Dataset argument: "manifest.tsv" (all entries), or "manifest.tsv:train" /
// ":test" to take one split.
struct DataSel {
  std::string path;
  std::string split = "all";
};

DataSel parse_data_arg(const std::string& arg) {
  DataSel sel;
  const std::size_t colon = arg.rfind(':');
  if (colon != std::string::npos && colon > 1) {
    const std::string suffix = arg.substr(colon + 1);
    if (suffix == "train" || suffix == "test" || suffix == "all") {
      sel.path = arg.substr(0, colon);
      sel.split = suffix;
      return sel;
    }
  }
  sel.path = arg;
  return sel;
}

std::vector<Submap> select_split(SynthDataset&& ds, const std::string& split) {
  if (split == "train") return std::move(ds.train);
  if (split == "test") return std::move(ds.test);
  std::vector<Submap> all = std::move(ds.train);
  for (auto& m : ds.test) all.push_back(std::move(m));
  return all;
}

template <typename T>
struct CkptModel {
  PcanModel<T> model;
  RunConfig cfg;
};

template <typename T>
CkptModel<T> model_from_checkpoint(const std::string& path) {
  Checkpoint<T> ck = load_checkpoint<T>(path);
  const auto it = ck.texts.find("config");
  if (it == ck.texts.end()) throw FormatError("checkpoint lacks a config record");
  CkptModel<T> out;
  out.cfg = parse_config_text(it->second);
  out.model.cfg = out.cfg.model;
  out.model.cfg.vlad.feature_dim = out.model.cfg.backbone.feature_dim();
  out.model.cfg.validate();
  for (auto& [name, t] : ck.tensors) {
    if (!name.starts_with("opt/")) out.model.params.emplace(name, std::move(t));
  }
  if (out.model.params.empty()) throw FormatError("checkpoint holds no parameters");
  return out;
}

struct Embedded {
  Tensor<double> desc = Tensor<double>::zeros({1, 1});
  std::vector<SubmapRef> meta;
};

Embedded embed_manifest(const std::string& ckpt, const DataSel& sel, std::size_t threads) {
  if (ckpt.empty()) throw ConfigError("--ckpt required when inputs are dataset manifests");
  auto maps = select_split(load_dataset(sel.path), sel.split);
  if (maps.empty()) throw ArgumentError("no submaps selected from " + sel.path);
  Embedded out;
  out.meta = submap_refs(maps);
  if (checkpoint_precision(ckpt) == 4) {
    out.desc = embed_submaps(model_from_checkpoint<float>(ckpt).model, maps, threads);
  } else {
    out.desc = embed_submaps(model_from_checkpoint<double>(ckpt).model, maps, threads);
  }
  return out;
}

bool is_manifest(const std::string& path) {
  return path.size() > 4 && path.compare(path.size() - 4, 4, ".tsv") == 0;
}

Embedded load_side(const std::string& ckpt, const DataSel& sel, std::size_t threads) {
  if (is_manifest(sel.path)) return embed_manifest(ckpt, sel, threads);
  Embedded out;
  out.desc = read_descriptors(sel.path);
  out.meta = read_descriptor_meta(sel.path + ".meta");
  if (out.meta.size() != out.desc.rows()) {
    throw FormatError(sel.path + ".meta has " + std::to_string(out.meta.size()) +
                      " entries for " + std::to_string(out.desc.rows()) + " descriptors");
  }
  return out;
}

// ---- subcommand bodies ----

int run_synth(const std::string& config, const std::vector<std::string>& sets,
              const std::string& out_flag) {
  RunConfig cfg = resolve_config(config, sets);
  const std::string out_dir = resolve_out(out_flag, nullptr);
  log_config(cfg);
  const SynthDataset ds = generate_synthetic_dataset(cfg.synth);
  const auto manifest = write_dataset(ds, out_dir);
  std::cout << "wrote " << ds.train.size() << " train + " << ds.test.size()
            << " test submaps, manifest " << manifest.string() << "\n";
  return 0;
}

int run_train(const std::string& config, const std::vector<std::string>& sets,
              const std::string& data, const std::string& out_flag, const std::string& resume,
              std::size_t threads_flag) {
  RunConfig cfg = resolve_config(config, sets);
  cfg.train.resume_from = resume;
  cfg.train.n_threads = resolve_threads(threads_flag);
  const std::string out_dir = resolve_out(out_flag, nullptr);
  log_config(cfg);

  auto maps = select_split(load_dataset(data), "train");
  if (maps.empty()) throw ArgumentError("manifest " + data + " has no train submaps");
  const std::string snapshot = dump_config(cfg);

  TrainResult res;
  if (cfg.train.precision == "f32") {
    res = train_impl<float>(maps, cfg.model, cfg.train, cfg.mining, cfg.loss, out_dir, snapshot);
  } else {
    res = train_impl<double>(maps, cfg.model, cfg.train, cfg.mining, cfg.loss, out_dir, snapshot);
  }
  char buf[128];
  std::snprintf(buf, sizeof buf, "trained %zu epochs on %zu tuples, final loss %.12g\n",
                res.epoch_losses.size(), res.n_tuples,
                res.epoch_losses.empty() ? 0.0 : res.epoch_losses.back());
  std::cout << buf << "checkpoint " << res.checkpoint_path.string() << "\nloss log "
            << res.loss_log_path.string() << "\n";
  return 0;
}

int run_embed(const std::string& ckpt, const std::string& data, const std::string& out_flag,
              std::size_t threads_flag) {
  const DataSel sel = parse_data_arg(data);
  const std::string out = resolve_out(out_flag, "descriptors.bin");
  const Embedded e = embed_manifest(ckpt, sel, resolve_threads(threads_flag));
  write_descriptors(out, e.desc);
  write_descriptor_meta(out + ".meta", e.meta);
  std::cout << "embedded " << e.desc.rows() << " submaps -> " << out << "\n";
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& db_arg, const std::string& q_arg,
             const std::string& out_flag, std::size_t max_n, std::size_t threads_flag) {
  const std::size_t threads = resolve_threads(threads_flag);
  const std::string out = resolve_out(out_flag, "recall.tsv");
  const Embedded db_e = load_side(ckpt, parse_data_arg(db_arg), threads);
  const Embedded q_e = load_side(ckpt, parse_data_arg(q_arg), threads);

  DescriptorDB db;
  db.descriptors = db_e.desc;
  db.meta = db_e.meta;
  db.validate();

  const RecallCurve curve = recall_curve(q_e.meta, q_e.desc, db, max_n, threads);
  write_recall_curve(out, curve);
  char buf[128];
  std::snprintf(buf, sizeof buf, "recall@1 %.6f  recall@top1pct %.6f  (%zu queries, db %zu)\n",
                curve.recall_at.empty() ? 0.0 : curve.recall_at.front(), curve.recall_top1pct,
                curve.n_queries, db.meta.size());
  std::cout << buf;
  return 0;
}

template <typename T>
Tensor<double> attention_for(const std::string& ckpt, const Tensor<double>& coords) {
  const CkptModel<T> cm = model_from_checkpoint<T>(ckpt);
  PointCloud<double> cloud;
  cloud.coords = coords;
  const Tensor<T> att = cm.model.attention_map(cloud_cast<T>(cloud));
  Tensor<double> out = Tensor<double>::zeros({att.size()});
  for (std::size_t i = 0; i < att.size(); ++i) out.values()[i] = static_cast<double>(att.values()[i]);
  return out;
}

int run_attend(const std::string& ckpt, const std::string& submap, const std::string& out_flag) {
  const std::string out = resolve_out(out_flag, "attention.ply");
  const Tensor<double> coords = load_submap_coords(submap);
  const Tensor<double> att = checkpoint_precision(ckpt) == 4
                                 ? attention_for<float>(ckpt, coords)
                                 : attention_for<double>(ckpt, coords);
  write_attention_ply(out, coords, att);
  std::cout << "wrote " << out << " (" << coords.rows() << " vertices)\n";
  return 0;
}

// Small default shapes so the element-wise finite-difference sweep stays fast.
RunConfig tiny_runconfig() {
  RunConfig cfg;
  cfg.model.backbone.mlp_widths = {8, 8, 8, 16, 8};
  cfg.model.backbone.tnet_mlp_widths = {4, 8};
  cfg.model.backbone.tnet_fc_widths = {8};
  cfg.model.attention.n_centroids = 8;
  cfg.model.attention.scales[0] = SagConfig{8, 0.4, 4, {6, 8}};
  cfg.model.attention.scales[1] = SagConfig{8, 0.8, 4, {6, 8}};
  cfg.model.attention.scales[2] = SagConfig{8, 1.6, 8, {6, 8}};
  cfg.model.attention.accum_mlp = {12, 16};
  cfg.model.attention.fp1_widths = {12, 10};
  cfg.model.attention.fp2_widths = {10, 10};
  cfg.model.attention.fc_widths = {1, 1};
  cfg.model.vlad.clusters = 4;
  return cfg;
}

// Test hook: forwards the value untouched but inflates the gradient, so the
// finite-difference check must flag it.
VarId corrupt_gradient(Tape<double>& tape, VarId x) {
  Tensor<double> v = tape.value(x);
  return tape.apply("corrupted_identity", std::move(v), {x},
                    [](const Tape<double>::BackwardCtx& ctx) {
                      if (ctx.in_grads[0] == nullptr) return;
                      auto g = ctx.out_grad.values();
                      auto dst = ctx.in_grads[0]->values();
                      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += 1.1 * g[i];
                    });
}

int run_gradcheck(const std::string& config, const std::vector<std::string>& sets, bool corrupt) {
  RunConfig cfg = config.empty() ? tiny_runconfig() : parse_config_file(config);
  for (const auto& s : sets) apply_override(cfg, s);
  cfg.model.vlad.feature_dim = cfg.model.backbone.feature_dim();
  cfg.model.validate();
  log_config(cfg);

  PcanModel<double> model;
  model.cfg = cfg.model;
  Rng rng(cfg.train.seed);
  model.init(rng);

  const std::size_t n_points = 32;
  PointCloud<double> cloud;
  cloud.coords = Tensor<double>::zeros({n_points, 3});
  for (double& v : cloud.coords.values()) v = rng.uniform(-1.0, 1.0);

  Tensor<double> probe = Tensor<double>::zeros({VladConfig::output_dim});
  for (double& v : probe.values()) v = rng.uniform(-1.0, 1.0);

  const GraphBuilder<double> build = [&](Tape<double>& tape, const ParamVars& pv) {
    VarId desc = model.forward(tape, pv, cloud);
    VarId out = tape.sum_all(tape.mul(desc, tape.constant(probe)));
    if (corrupt) out = corrupt_gradient(tape, out);
    return out;
  };

  const double tol = 1e-5;
  const FdReport<double> report = finite_diff_check<double>(build, model.params, tol);

  struct Group {
    double worst = 0;
    std::size_t tensors = 0;
    std::size_t excluded = 0;
  };
  std::map<std::string, Group> groups;
  for (const auto& e : report.entries) {
    const std::string key = e.name.substr(0, e.name.find('/'));
    Group& g = groups[key];
    ++g.tensors;
    if (e.excluded) {
      ++g.excluded;
    } else {
      g.worst = std::max(g.worst, static_cast<double>(e.rel_err));
    }
  }
  char buf[160];
  for (const auto& [name, g] : groups) {
    std::snprintf(buf, sizeof buf, "group %-10s worst_rel_err %.3e over %zu tensors (%zu kink-excluded)\n",
                  name.c_str(), g.worst, g.tensors, g.excluded);
    std::cout << buf;
  }
  std::snprintf(buf, sizeof buf, "gradcheck %s: worst %.3e, tolerance %.0e\n",
                report.passed ? "PASS" : "FAIL", static_cast<double>(report.worst), tol);
  std::cout << buf;
  return report.passed ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"point-cloud place recognition pipeline"};
  app.require_subcommand(1);

  std::string config, data, out, ckpt, db_arg, q_arg, submap, resume;
  std::vector<std::string> sets;
  std::size_t threads = 0;
  std::size_t max_n = 25;
  bool corrupt = false;
  std::function<int()> runner;

  app.add_option("--threads", threads, "worker threads (also env PCAN_THREADS; default 1)");

  auto* synth = app.add_subcommand("synth", "generate a labeled synthetic dataset");
  synth->add_option("--config", config, "config file");
  synth->add_option("--set", sets, "override, e.g. synth.n_scenes=4");
  synth->add_option("--out", out, "output directory");
  synth->callback([&] { runner = [&] { return run_synth(config, sets, out); }; });

  auto* train = app.add_subcommand("train", "train a model on a dataset manifest");
  train->add_option("--config", config, "config file");
  train->add_option("--set", sets, "override, e.g. train.epochs=5");
  train->add_option("--data", data, "dataset manifest")->required();
  train->add_option("--out", out, "output directory");
  train->add_option("--resume", resume, "checkpoint to continue from");
  train->callback([&] { runner = [&] { return run_train(config, sets, data, out, resume, threads); }; });

  auto* embed = app.add_subcommand("embed", "compute descriptors for a dataset");
  embed->add_option("--ckpt", ckpt, "model checkpoint")->required();
  embed->add_option("--data", data, "manifest path, optionally path:train or path:test")->required();
  embed->add_option("--out", out, "descriptor file to write");
  embed->callback([&] { runner = [&] { return run_embed(ckpt, data, out, threads); }; });

  auto* eval = app.add_subcommand("eval", "retrieval recall of queries against a database");
  eval->add_option("--ckpt", ckpt, "model checkpoint (needed for manifest inputs)");
  eval->add_option("--db", db_arg, "database: manifest[:split] or descriptor file")->required();
  eval->add_option("--queries", q_arg, "queries: manifest[:split] or descriptor file")->required();
  eval->add_option("--out", out, "recall curve file to write");
  eval->add_option("--max-n", max_n, "largest n for recall@n (default 25)");
  eval->callback([&] { runner = [&] { return run_eval(ckpt, db_arg, q_arg, out, max_n, threads); }; });

  auto* attend = app.add_subcommand("attend", "export per-point attention as ASCII PLY");
  attend->add_option("--ckpt", ckpt, "model checkpoint")->required();
  attend->add_option("--submap", submap, "submap coordinate file")->required();
  attend->add_option("--out", out, "PLY file to write");
  attend->callback([&] { runner = [&] { return run_attend(ckpt, submap, out); }; });

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference audit of all gradients");
  gradcheck->add_option("--config", config, "config file (default: small built-in shapes)");
  gradcheck->add_option("--set", sets, "override, e.g. model.clusters=2");
  gradcheck->add_flag("--corrupt-gradient", corrupt)->group("");  // test hook, hidden
  gradcheck->callback([&] { runner = [&] { return run_gradcheck(config, sets, corrupt); }; });

  CLI11_PARSE(app, argc, argv);
  if (!runner) return 0;
  return guarded(runner);
}
