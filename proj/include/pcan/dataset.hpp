#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pcan/point_ops.hpp"
#include "pcan/tensor.hpp"

namespace pcan {

// Per-point semantic labels emitted by the synthetic generator.
inline constexpr std::uint8_t kLabelStructure = 0;
inline constexpr std::uint8_t kLabelFoliage = 1;
inline constexpr std::uint8_t kLabelFloater = 2;

// Number of points in a benchmark-format submap file.
inline constexpr std::size_t kBenchmarkPoints = 4096;

struct Submap {
  std::string id;
  double northing = 0.0;  // meters
  double easting = 0.0;   // meters
  PointCloud<double> cloud;
};

struct SynthConfig {
  std::size_t n_scenes = 8;        // training scenes
  std::size_t n_test_scenes = 2;   // held-out scenes on the same grid
  std::size_t scans_per_scene = 4; // re-visits of one scene (positives)
  std::size_t points_per_scene = 512;
  double structure_fraction = 0.70;
  double foliage_fraction = 0.20;
  double floater_fraction = 0.10;
  double jitter_scale = 0.01;      // per-scan structure perturbation, model units
  double grid_spacing_m = 100.0;   // scene-center spacing; keeps scenes negative
  double scan_offset_m = 4.0;      // max scan displacement from the scene center
  std::uint64_t seed = 1;

  // Scans of one scene sit within scan_offset_m of its center, so any two are
  // at most 2*scan_offset_m apart; distinct scenes are at least
  // grid_spacing_m - 2*scan_offset_m apart. The defaults give <= 8 m within a
  // scene and >= 92 m across scenes, matching the 10 m / 50 m mining radii.
  void validate() const;
};

struct SynthDataset {
  std::vector<Submap> train;
  std::vector<Submap> test;
};

SynthDataset generate_synthetic_dataset(const SynthConfig& cfg);

// Raw coordinate files: row-major N x 3, 64-bit little-endian reals.
void save_submap(const std::filesystem::path& path, const Tensor<double>& coords);

// N derived from the file size; size must be a positive multiple of 24 bytes.
Tensor<double> load_submap_coords(const std::filesystem::path& path);

// Benchmark convention: exactly 4096 points, i.e. a 98304-byte file.
Tensor<double> load_benchmark_submap(const std::filesystem::path& path);

// Label sidecar: one byte per point, same order as the coordinate file.
void save_labels(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels);
std::vector<std::uint8_t> load_labels(const std::filesystem::path& path, std::size_t n_expected);

struct ManifestEntry {
  std::string id;
  std::string rel_path;  // cloud file, relative to the manifest's directory
  double northing = 0.0;
  double easting = 0.0;
  std::string split;  // "train" or "test"
};

// Tab-separated, one record per line: id, path, northing, easting, split.
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

// Writes clouds/<id>.bin + clouds/<id>.labels for every submap plus
// manifest.tsv in out_dir; returns the manifest path.
std::filesystem::path write_dataset(const SynthDataset& ds, const std::filesystem::path& out_dir);

// Rebuilds the dataset from a manifest, loading clouds and any label sidecars.
SynthDataset load_dataset(const std::filesystem::path& manifest_path);

}  // namespace pcan
