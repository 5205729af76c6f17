// Instantiation smoke check: a tiny model must produce a finite unit-norm
// descriptor in both precisions.

#include <doctest.h>

#include "pcan/config.hpp"
#include "pcan/model.hpp"
#include "pcan/rng.hpp"

namespace {

pcan::ModelConfig tiny_model() {
  pcan::ModelConfig cfg;
  cfg.backbone.mlp_widths = {8, 8, 8, 16, 8};
  cfg.attention.n_centroids = 8;
  cfg.attention.scales[0] = pcan::SagConfig{8, 0.4, 4, {6, 8}};
  cfg.attention.scales[1] = pcan::SagConfig{8, 0.8, 4, {6, 8}};
  cfg.attention.scales[2] = pcan::SagConfig{8, 1.6, 8, {6, 8}};
  cfg.attention.accum_mlp = {12, 16};
  cfg.attention.fp1_widths = {12, 10};
  cfg.attention.fp2_widths = {10, 10};
  cfg.vlad.clusters = 4;
  return cfg;
}

template <typename T>
void run_tiny_forward() {
  pcan::PcanModel<T> model;
  model.cfg = tiny_model();
  pcan::Rng rng(11);
  model.init(rng);

  pcan::PointCloud<T> cloud;
  cloud.coords = pcan::Tensor<T>::zeros({24, 3});
  for (auto& v : cloud.coords.values()) v = static_cast<T>(rng.uniform(-1.0, 1.0));

  const pcan::Tensor<T> d = model.descriptor(cloud);
  REQUIRE(d.size() == pcan::VladConfig::output_dim);
  REQUIRE(d.finite());
  T norm_sq = 0;
  for (T v : d.values()) norm_sq += v * v;
  CHECK(std::abs(std::sqrt(static_cast<double>(norm_sq)) - 1.0) < 1e-5);
}

}  // namespace

TEST_CASE("tiny forward pass, f64") { run_tiny_forward<double>(); }
TEST_CASE("tiny forward pass, f32") { run_tiny_forward<float>(); }
