#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "pcan/checkpoint.hpp"
#include "pcan/train.hpp"
#include "testutil.hpp"

using namespace pcan;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig mc;
  mc.backbone.mlp_widths = {4, 4, 4, 8, 4};
  mc.attention.n_centroids = 4;
  mc.attention.scales[0] = SagConfig{4, 0.5, 3, {4, 5}};
  mc.attention.scales[1] = SagConfig{4, 1.0, 3, {4, 5}};
  mc.attention.scales[2] = SagConfig{4, 2.0, 4, {4, 5}};
  mc.attention.accum_mlp = {6};
  mc.attention.fp1_widths = {5};
  mc.attention.fp2_widths = {4};
  mc.vlad.clusters = 2;
  return mc;
}

// Five submaps on a line: two revisits of one place (1 m apart) and three
// isolated places 100 m from each other, so mining yields exactly the two
// tuples anchored at the revisited place.
std::vector<Submap> line_maps() {
  Rng rng(21);
  std::vector<Submap> maps;
  const double northing[] = {0.0, 1.0, 100.0, 200.0, 300.0};
  for (int i = 0; i < 5; ++i) {
    Submap m;
    m.id = "s" + std::to_string(i);
    m.northing = northing[i];
    m.easting = 0.0;
    m.cloud = testutil::random_cloud(rng, 16, 0.9);
    maps.push_back(std::move(m));
  }
  // Make the revisit a slightly jittered copy of the anchor scan.
  maps[1].cloud = maps[0].cloud;
  Rng jr(22);
  for (std::size_t i = 0; i < maps[1].cloud.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      maps[1].cloud.coords(i, c) += 0.01 * jr.normal();
      maps[1].cloud.coords(i, c) = std::clamp(maps[1].cloud.coords(i, c), -1.0, 1.0);
    }
  }
  return maps;
}

TrainResult run_train(const std::filesystem::path& out, const TrainConfig& cfg,
                      const std::string& snapshot = "cfg-snapshot") {
  return train_impl<double>(line_maps(), tiny_cfg(), cfg, MiningConfig{}, LossConfig{}, out,
                            snapshot);
}

std::string file_bytes(const std::filesystem::path& p) { return testutil::read_file(p); }

}  // namespace

TEST_CASE("checkpoint container round-trips tensors and text") {
  testutil::TempDir dir;
  Checkpoint<double> ckpt;
  Rng rng(3);
  Tensor<double> a({3});
  Tensor<double> b({2, 4});
  Tensor<double> c({2, 2, 3});
  for (auto& t : {&a, &b, &c}) {
    for (double& v : t->values()) v = rng.normal();
  }
  ckpt.tensors.emplace("alpha", a);
  ckpt.tensors.emplace("beta/W", b);
  ckpt.tensors.emplace("gamma", c);
  ckpt.texts.emplace("note", "epoch\t3\n");
  ckpt.texts.emplace("empty", "");

  const auto path = dir.path() / "t.ckpt";
  save_checkpoint(path, ckpt);
  const Checkpoint<double> back = load_checkpoint<double>(path);

  REQUIRE_EQ(back.tensors.size(), 3);
  REQUIRE_EQ(back.texts.size(), 2);
  for (const auto& [name, t] : ckpt.tensors) {
    const Tensor<double>& r = back.tensors.at(name);
    REQUIRE(r.same_shape(t));
    for (std::size_t i = 0; i < t.values().size(); ++i) CHECK_EQ(r.values()[i], t.values()[i]);
  }
  CHECK_EQ(back.texts.at("note"), "epoch\t3\n");
  CHECK_EQ(back.texts.at("empty"), "");
}

TEST_CASE("precision probe reads the element width without loading") {
  testutil::TempDir dir;
  Checkpoint<double> c64;
  c64.tensors.emplace("x", Tensor<double>::full({2}, 1.5));
  save_checkpoint(dir.path() / "w8.ckpt", c64);
  CHECK_EQ(checkpoint_precision(dir.path() / "w8.ckpt"), 8);

  Checkpoint<float> c32;
  c32.tensors.emplace("x", Tensor<float>::full({2}, 1.5f));
  save_checkpoint(dir.path() / "w4.ckpt", c32);
  CHECK_EQ(checkpoint_precision(dir.path() / "w4.ckpt"), 4);

  testutil::write_file(dir.path() / "junk.bin", "not a checkpoint at all....");
  CHECK_THROWS_AS(checkpoint_precision(dir.path() / "junk.bin"), FormatError);
  CHECK_THROWS_AS(checkpoint_precision(dir.path() / "absent.ckpt"), IoError);
}

TEST_CASE("cross-precision load is refused with an actionable message") {
  testutil::TempDir dir;
  Checkpoint<double> c64;
  c64.tensors.emplace("x", Tensor<double>::full({2}, 1.5));
  const auto p64 = dir.path() / "w8.ckpt";
  save_checkpoint(p64, c64);

  CHECK_THROWS_AS(load_checkpoint<float>(p64), FormatError);
  try {
    load_checkpoint<float>(p64);
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("64-bit values") != std::string::npos);
    CHECK(msg.find("32-bit precision") != std::string::npos);
    CHECK(msg.find("matching precision") != std::string::npos);
  }

  Checkpoint<float> c32;
  c32.tensors.emplace("x", Tensor<float>::full({2}, 1.5f));
  const auto p32 = dir.path() / "w4.ckpt";
  save_checkpoint(p32, c32);
  CHECK_THROWS_AS(load_checkpoint<double>(p32), FormatError);
}

TEST_CASE("corrupt checkpoint files are rejected whole") {
  testutil::TempDir dir;
  Checkpoint<double> ckpt;
  ckpt.tensors.emplace("a", Tensor<double>::full({2, 2}, 0.25));
  ckpt.texts.emplace("note", "hello");
  const auto good = dir.path() / "good.ckpt";
  save_checkpoint(good, ckpt);
  const std::string bytes = file_bytes(good);

  SUBCASE("wrong magic") {
    std::string bad = bytes;
    bad[0] = 'X';
    testutil::write_file(dir.path() / "bad.ckpt", bad);
    CHECK_THROWS_AS(load_checkpoint<double>(dir.path() / "bad.ckpt"), FormatError);
  }
  SUBCASE("unsupported version") {
    std::string bad = bytes;
    bad[8] = 99;  // version field directly follows the 8-byte magic
    testutil::write_file(dir.path() / "bad.ckpt", bad);
    CHECK_THROWS_AS(load_checkpoint<double>(dir.path() / "bad.ckpt"), FormatError);
  }
  SUBCASE("truncation at any payload depth") {
    for (std::size_t cut : {bytes.size() - 1, bytes.size() - 9, std::size_t{30}, std::size_t{20}}) {
      testutil::write_file(dir.path() / "bad.ckpt", bytes.substr(0, cut));
      CHECK_THROWS_AS(load_checkpoint<double>(dir.path() / "bad.ckpt"), FormatError);
    }
  }
  SUBCASE("trailing bytes") {
    testutil::write_file(dir.path() / "bad.ckpt", bytes + "Z");
    CHECK_THROWS_AS(load_checkpoint<double>(dir.path() / "bad.ckpt"), FormatError);
  }
  SUBCASE("unknown record kind") {
    std::string bad = bytes;
    bad[24] = 7;  // first record's kind byte: magic 8 + version 4 + width 4 + count 8
    testutil::write_file(dir.path() / "bad.ckpt", bad);
    CHECK_THROWS_AS(load_checkpoint<double>(dir.path() / "bad.ckpt"), FormatError);
  }
  SUBCASE("duplicate record names") {
    const auto dup = dir.path() / "dup.ckpt";
    std::ofstream os(dup, std::ios::binary);
    os.write(kCheckpointMagic, 8);
    write_u32_le(os, kCheckpointVersion);
    write_u32_le(os, 8);
    write_u64_le(os, 2);
    for (int rep = 0; rep < 2; ++rep) {
      write_u8(os, 0);
      write_u32_le(os, 4);
      os.write("same", 4);
      write_u32_le(os, 1);   // rank
      write_u64_le(os, 1);   // dim
      write_f64_le(os, 3.0);
    }
    os.close();
    CHECK_THROWS_AS(load_checkpoint<double>(dup), FormatError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint<double>(dir.path() / "absent.ckpt"), IoError);
  }
}

TEST_CASE("saving and reloading a model reproduces its outputs bit-exactly") {
  testutil::TempDir dir;
  Rng crng(7);
  const PointCloud<double> cloud = testutil::random_cloud(crng, 16, 0.9);

  SUBCASE("64-bit") {
    PcanModel<double> model;
    model.cfg = tiny_cfg();
    Rng rng(5);
    model.init(rng);
    const Tensor<double> before = model.descriptor(cloud);

    AdamState<double> opt;
    opt.reset(model.params);
    Rng state_rng(9);
    const auto path = dir.path() / "m.ckpt";
    save_checkpoint(path, make_checkpoint(model, opt, state_rng, 0, "", ""));

    PcanModel<double> loaded;
    loaded.cfg = tiny_cfg();
    AdamState<double> opt2;
    Rng rng2(1);
    std::size_t epochs_done = 99;
    std::string history = "x";
    restore_checkpoint(load_checkpoint<double>(path), loaded, opt2, rng2, epochs_done, history);
    CHECK_EQ(epochs_done, 0);
    CHECK_EQ(history, "");

    const Tensor<double> after = loaded.descriptor(cloud);
    REQUIRE(after.same_shape(before));
    for (std::size_t i = 0; i < before.values().size(); ++i) {
      CHECK_EQ(after.values()[i], before.values()[i]);
    }
  }
  SUBCASE("32-bit") {
    PcanModel<float> model;
    model.cfg = tiny_cfg();
    Rng rng(5);
    model.init(rng);
    const PointCloud<float> fcloud = cloud_cast<float>(cloud);
    const Tensor<float> before = model.descriptor(fcloud);

    AdamState<float> opt;
    opt.reset(model.params);
    Rng state_rng(9);
    const auto path = dir.path() / "m32.ckpt";
    save_checkpoint(path, make_checkpoint(model, opt, state_rng, 0, "", ""));
    CHECK_EQ(checkpoint_precision(path), 4);

    PcanModel<float> loaded;
    loaded.cfg = tiny_cfg();
    AdamState<float> opt2;
    Rng rng2(1);
    std::size_t epochs_done = 0;
    std::string history;
    restore_checkpoint(load_checkpoint<float>(path), loaded, opt2, rng2, epochs_done, history);

    const Tensor<float> after = loaded.descriptor(fcloud);
    for (std::size_t i = 0; i < before.values().size(); ++i) {
      CHECK_EQ(after.values()[i], before.values()[i]);
    }
  }
}

TEST_CASE("optimizer updates touch only parameters with nonzero gradients") {
  ParamStore<double> params;
  params.emplace("w", Tensor<double>::full({2, 2}, 1.0));
  params.emplace("u", Tensor<double>::full({3}, 2.0));
  ParamStore<double> grads;
  Tensor<double> gw({2, 2});
  gw(0, 0) = 0.5;
  gw(1, 1) = -0.25;
  grads.emplace("w", gw);
  grads.emplace("u", Tensor<double>::zeros({3}));

  SUBCASE("adaptive-moment path") {
    AdamState<double> opt;
    opt.reset(params);
    TrainConfig cfg;
    cfg.lr = 0.1;
    apply_updates(params, grads, opt, cfg);

    // Untouched parameter: value, moments, and step counter all pristine.
    for (double v : params.at("u").values()) CHECK_EQ(v, 2.0);
    for (double v : opt.m.at("u").values()) CHECK_EQ(v, 0.0);
    for (double v : opt.v.at("u").values()) CHECK_EQ(v, 0.0);
    CHECK_EQ(opt.t.at("u"), 0);

    CHECK_EQ(opt.t.at("w"), 1);
    CHECK_NE(params.at("w")(0, 0), 1.0);
    CHECK_NE(params.at("w")(1, 1), 1.0);
    // Zero-gradient entries inside an updated tensor still move only by the
    // moment machinery, which is zero for them on the first step.
    CHECK_EQ(params.at("w")(0, 1), 1.0);
  }
  SUBCASE("plain SGD is the exact first-order step") {
    AdamState<double> opt;
    opt.reset(params);
    TrainConfig cfg;
    cfg.optimizer = "sgd";
    cfg.lr = 0.1;
    apply_updates(params, grads, opt, cfg);
    CHECK_EQ(params.at("w")(0, 0), doctest::Approx(1.0 - 0.1 * 0.5).epsilon(1e-15));
    CHECK_EQ(params.at("w")(1, 1), doctest::Approx(1.0 + 0.1 * 0.25).epsilon(1e-15));
    CHECK_EQ(params.at("w")(0, 1), 1.0);
    for (double v : params.at("u").values()) CHECK_EQ(v, 2.0);
  }
  SUBCASE("gradient for an unknown parameter is a contract breach") {
    AdamState<double> opt;
    opt.reset(params);
    ParamStore<double> bad;
    bad.emplace("nope", Tensor<double>::full({1}, 1.0));
    TrainConfig cfg;
    CHECK_THROWS_AS(apply_updates(params, bad, opt, cfg), ContractError);
  }
  SUBCASE("gradient shape mismatch is rejected") {
    AdamState<double> opt;
    opt.reset(params);
    ParamStore<double> bad;
    bad.emplace("w", Tensor<double>::full({2, 3}, 1.0));
    TrainConfig cfg;
    CHECK_THROWS_AS(apply_updates(params, bad, opt, cfg), DimensionError);
  }
}

TEST_CASE("training configuration is validated") {
  TrainConfig cfg;
  cfg.validate();  // defaults are fine
  cfg.lr = -1e-3;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  cfg.lr = 0.0;
  cfg.validate();  // diagnostic no-op runs are allowed
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  cfg.epochs = 1;
  cfg.tuples_per_step = 0;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  cfg.tuples_per_step = 4;
  cfg.optimizer = "momentum";
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  cfg.optimizer = "sgd";
  cfg.precision = "f16";
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
}

TEST_CASE("training is deterministic for a fixed seed and differs across seeds") {
  testutil::TempDir dir;
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 11;
  const TrainResult a = run_train(dir.path() / "a", cfg);
  const TrainResult b = run_train(dir.path() / "b", cfg);

  CHECK_EQ(file_bytes(a.loss_log_path), file_bytes(b.loss_log_path));
  CHECK_EQ(file_bytes(a.checkpoint_path), file_bytes(b.checkpoint_path));
  REQUIRE_EQ(a.epoch_losses.size(), 2);
  CHECK_EQ(a.epoch_losses[0], b.epoch_losses[0]);
  CHECK_EQ(a.epoch_losses[1], b.epoch_losses[1]);
  CHECK_EQ(a.n_tuples, 2);  // only the revisited place yields tuples

  // One loss record per epoch, numbered from 1.
  const std::string log = file_bytes(a.loss_log_path);
  CHECK_EQ(log.rfind("1\t", 0), 0);
  CHECK_EQ(std::count(log.begin(), log.end(), '\n'), 2);

  TrainConfig other = cfg;
  other.seed = 12;
  const TrainResult c = run_train(dir.path() / "c", other);
  CHECK_NE(file_bytes(a.checkpoint_path), file_bytes(c.checkpoint_path));
}

TEST_CASE("thread count does not change training results") {
  testutil::TempDir dir;
  TrainConfig cfg;
  cfg.epochs = 2;
  const TrainResult one = run_train(dir.path() / "one", cfg);
  TrainConfig threaded = cfg;
  threaded.n_threads = 3;
  const TrainResult par = run_train(dir.path() / "par", threaded);
  CHECK_EQ(file_bytes(one.loss_log_path), file_bytes(par.loss_log_path));
  CHECK_EQ(file_bytes(one.checkpoint_path), file_bytes(par.checkpoint_path));
}

TEST_CASE("zero learning rate leaves every parameter at its initialization") {
  testutil::TempDir dir;
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.lr = 0.0;
  const TrainResult res = run_train(dir.path() / "out", cfg);

  PcanModel<double> fresh;
  fresh.cfg = tiny_cfg();
  Rng rng(cfg.seed);
  fresh.init(rng);

  const Checkpoint<double> ckpt = load_checkpoint<double>(res.checkpoint_path);
  for (const auto& [name, p] : fresh.params) {
    const Tensor<double>& got = ckpt.tensors.at(name);
    REQUIRE(got.same_shape(p));
    for (std::size_t i = 0; i < p.values().size(); ++i) {
      CHECK_EQ(got.values()[i], p.values()[i]);
    }
  }
}

TEST_CASE("a memorizable tuple is driven to a small loss") {
  testutil::TempDir dir;
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.lr = 1e-2;
  cfg.tuples_per_step = 4;  // both mined tuples in every step
  const TrainResult res = run_train(dir.path() / "out", cfg);
  REQUIRE_EQ(res.epoch_losses.size(), 200);
  const double initial = res.epoch_losses.front();
  const double final_loss = res.epoch_losses.back();
  REQUIRE_GT(initial, 1e-6);
  CHECK_LT(final_loss, 0.1 * initial);
}

TEST_CASE("interrupted training resumes to the bit-identical result") {
  testutil::TempDir dir;
  TrainConfig full;
  full.epochs = 4;
  const TrainResult straight = run_train(dir.path() / "straight", full);

  TrainConfig half = full;
  half.epochs = 2;
  const TrainResult part = run_train(dir.path() / "part", half);

  TrainConfig rest = full;
  rest.resume_from = part.checkpoint_path.string();
  const TrainResult resumed = run_train(dir.path() / "resumed", rest);

  CHECK_EQ(file_bytes(straight.loss_log_path), file_bytes(resumed.loss_log_path));
  CHECK_EQ(file_bytes(straight.checkpoint_path), file_bytes(resumed.checkpoint_path));
  REQUIRE_EQ(resumed.epoch_losses.size(), 4);
  // Pre-interrupt entries of the resumed history are re-read from the text
  // log, whose 12-significant-digit records bound the in-memory agreement.
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK_EQ(resumed.epoch_losses[i],
             doctest::Approx(straight.epoch_losses[i]).epsilon(1e-11));
  }

  SUBCASE("resuming past the requested horizon is an error") {
    TrainConfig done = half;
    done.resume_from = part.checkpoint_path.string();
    CHECK_THROWS_AS(run_train(dir.path() / "noop", done), ArgumentError);
  }
  SUBCASE("the checkpoint records the config snapshot and epoch counter") {
    const Checkpoint<double> ckpt = load_checkpoint<double>(straight.checkpoint_path);
    CHECK_EQ(ckpt.texts.at("config"), "cfg-snapshot");
    CHECK_EQ(ckpt.texts.at("epoch"), "4");
    CHECK_EQ(ckpt.texts.at("history"), file_bytes(straight.loss_log_path));
  }
}

TEST_CASE("periodic snapshots keep training resumable mid-run") {
  testutil::TempDir dir;
  TrainConfig cfg;
  cfg.epochs = 4;
  const TrainResult straight = run_train(dir.path() / "straight", cfg);

  // Snapshot after every epoch, then simulate a crash after epoch 3 by
  // resuming from a copy of the epoch-3 snapshot.
  TrainConfig snap = cfg;
  snap.epochs = 3;
  snap.checkpoint_every = 1;
  const TrainResult upto3 = run_train(dir.path() / "snap", snap);

  TrainConfig rest = cfg;
  rest.resume_from = upto3.checkpoint_path.string();
  const TrainResult resumed = run_train(dir.path() / "resumed", rest);
  CHECK_EQ(file_bytes(straight.checkpoint_path), file_bytes(resumed.checkpoint_path));
  CHECK_EQ(file_bytes(straight.loss_log_path), file_bytes(resumed.loss_log_path));
}

TEST_CASE("non-finite values abort training with a diagnostic naming the op") {
  testutil::TempDir dir;
  TrainConfig cfg;
  cfg.epochs = 1;
  const TrainResult seeded = run_train(dir.path() / "seeded", cfg);

  Checkpoint<double> ckpt = load_checkpoint<double>(seeded.checkpoint_path);
  for (auto& [name, t] : ckpt.tensors) {
    if (name.rfind("opt/", 0) == 0) continue;
    t.values()[0] = std::numeric_limits<double>::quiet_NaN();
    break;  // poison the first model parameter only
  }
  const auto poisoned = dir.path() / "poisoned.ckpt";
  save_checkpoint(poisoned, ckpt);

  TrainConfig rest = cfg;
  rest.epochs = 2;
  rest.resume_from = poisoned.string();
  CHECK_THROWS_AS(run_train(dir.path() / "resumed", rest), NonFiniteError);
  try {
    run_train(dir.path() / "resumed2", rest);
  } catch (const NonFiniteError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("op '") != std::string::npos);
  }
}

TEST_CASE("training refuses a dataset that yields no tuples") {
  testutil::TempDir dir;
  Rng rng(31);
  std::vector<Submap> maps;
  for (int i = 0; i < 3; ++i) {
    Submap m;
    m.id = "far" + std::to_string(i);
    m.northing = i * 500.0;
    m.cloud = testutil::random_cloud(rng, 16, 0.9);
    maps.push_back(std::move(m));
  }
  TrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(
      train_impl<double>(maps, tiny_cfg(), cfg, MiningConfig{}, LossConfig{}, dir.path(), ""),
      ArgumentError);
}

TEST_CASE("32-bit training runs and stamps its precision into the checkpoint") {
  testutil::TempDir dir;
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.precision = "f32";
  const TrainResult res = train_impl<float>(line_maps(), tiny_cfg(), cfg, MiningConfig{},
                                            LossConfig{}, dir.path() / "out", "snap");
  CHECK_EQ(checkpoint_precision(res.checkpoint_path), 4);
  CHECK_THROWS_AS(load_checkpoint<double>(res.checkpoint_path), FormatError);
  REQUIRE_EQ(res.epoch_losses.size(), 1);
  CHECK(std::isfinite(res.epoch_losses[0]));
}
