#include "pcan/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "pcan/binio.hpp"
#include "pcan/errors.hpp"
#include "pcan/rng.hpp"

namespace pcan {
namespace {

constexpr double kCoordBound = 1.0;
constexpr double kCoordTol = 1e-6;
// A floater must be at least this far from every other point in its scan.
constexpr double kFloaterIsolation = 0.15;

double clamp_coord(double v) { return std::clamp(v, -kCoordBound, kCoordBound); }

void validate_coords(const Tensor<double>& coords, const std::filesystem::path& path) {
  for (double v : coords.values()) {
    if (!std::isfinite(v) || std::abs(v) > kCoordBound + kCoordTol) {
      throw ValidationError("coordinate " + std::to_string(v) + " outside [-1,1] in " +
                            path.string());
    }
  }
}

std::string scan_id(std::size_t scene, std::size_t scan) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "scene%03zu_scan%02zu", scene, scan);
  return buf;
}

struct Facade {
  int axis;        // 0/1/2: which coordinate is (near-)constant
  double offset;   // plane position along that axis
  double lo[2];    // extent of the two in-plane axes
  double hi[2];
};

// Scene blueprint: geometry that is stable across re-scans of the same place.
struct SceneBlueprint {
  std::vector<Facade> facades;
  Tensor<double> structure;                // base structure points, n_struct x 3
  std::vector<std::array<double, 3>> foliage_centers;
};

SceneBlueprint make_blueprint(Rng& rng, std::size_t n_struct, std::size_t n_foliage_clusters) {
  SceneBlueprint bp;
  const std::size_t n_facades = 2 + rng.below(3);  // 2..4 walls
  bp.facades.reserve(n_facades);
  for (std::size_t f = 0; f < n_facades; ++f) {
    Facade fc;
    fc.axis = static_cast<int>(rng.below(3));
    fc.offset = rng.uniform(-0.8, 0.8);
    for (int a = 0; a < 2; ++a) {
      const double c = rng.uniform(-0.5, 0.5);
      const double half = rng.uniform(0.2, 0.45);
      fc.lo[a] = std::max(-0.9, c - half);
      fc.hi[a] = std::min(0.9, c + half);
    }
    bp.facades.push_back(fc);
  }

  bp.structure = Tensor<double>::zeros({n_struct, 3});
  for (std::size_t i = 0; i < n_struct; ++i) {
    const Facade& fc = bp.facades[i % bp.facades.size()];
    double p[3];
    p[fc.axis] = fc.offset + rng.normal() * 0.005;  // wall thickness
    int a = 0;
    for (int d = 0; d < 3; ++d) {
      if (d == fc.axis) continue;
      p[d] = rng.uniform(fc.lo[a], fc.hi[a]);
      ++a;
    }
    for (int d = 0; d < 3; ++d) bp.structure(i, d) = clamp_coord(p[d]);
  }

  bp.foliage_centers.resize(n_foliage_clusters);
  for (auto& c : bp.foliage_centers) {
    for (int d = 0; d < 3; ++d) c[d] = rng.uniform(-0.7, 0.7);
  }
  return bp;
}

double nearest_sq_dist(const std::vector<std::array<double, 3>>& pts,
                       const std::array<double, 3>& q) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : pts) {
    double s = 0.0;
    for (int d = 0; d < 3; ++d) {
      const double diff = p[d] - q[d];
      s += diff * diff;
    }
    best = std::min(best, s);
  }
  return best;
}

PointCloud<double> render_scan(const SceneBlueprint& bp, const SynthConfig& cfg,
                               std::size_t n_struct, std::size_t n_foliage,
                               std::size_t n_floater, Rng& rng) {
  const std::size_t n = n_struct + n_foliage + n_floater;
  std::vector<std::array<double, 3>> pts;
  pts.reserve(n);
  std::vector<std::uint8_t> labels;
  labels.reserve(n);

  for (std::size_t i = 0; i < n_struct; ++i) {
    std::array<double, 3> p;
    for (int d = 0; d < 3; ++d) {
      p[d] = clamp_coord(bp.structure(i, d) + rng.normal() * cfg.jitter_scale);
    }
    pts.push_back(p);
    labels.push_back(kLabelStructure);
  }

  for (std::size_t i = 0; i < n_foliage; ++i) {
    const auto& c = bp.foliage_centers[i % bp.foliage_centers.size()];
    std::array<double, 3> p;
    for (int d = 0; d < 3; ++d) p[d] = clamp_coord(c[d] + rng.normal() * 0.08);
    pts.push_back(p);
    labels.push_back(kLabelFoliage);
  }

  for (std::size_t i = 0; i < n_floater; ++i) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < 4096; ++attempt) {
      std::array<double, 3> p;
      for (int d = 0; d < 3; ++d) p[d] = rng.uniform(-0.9, 0.9);
      if (nearest_sq_dist(pts, p) > kFloaterIsolation * kFloaterIsolation) {
        pts.push_back(p);
        labels.push_back(kLabelFloater);
        placed = true;
        break;
      }
    }
    if (!placed) {
      throw ArgumentError("cannot place isolated floater points; "
                          "lower floater_fraction or points_per_scene");
    }
  }

  PointCloud<double> cloud;
  cloud.coords = Tensor<double>::zeros({n, 3});
  for (std::size_t i = 0; i < n; ++i) {
    for (int d = 0; d < 3; ++d) cloud.coords(i, d) = pts[i][d];
  }
  cloud.labels = std::move(labels);
  cloud.validate();
  return cloud;
}

// Offset uniform in the disc of radius cfg.scan_offset_m, so two scans of one
// scene are at most 2*scan_offset_m apart.
std::array<double, 2> scan_offset(const SynthConfig& cfg, Rng& rng) {
  const double r = cfg.scan_offset_m;
  for (;;) {
    const double u = rng.uniform(-r, r);
    const double v = rng.uniform(-r, r);
    if (u * u + v * v <= r * r) return {u, v};
  }
}

}  // namespace

void SynthConfig::validate() const {
  if (n_scenes == 0) throw ArgumentError("n_scenes must be positive");
  if (scans_per_scene < 2) throw ArgumentError("scans_per_scene must be >= 2");
  if (points_per_scene < 64) throw ArgumentError("points_per_scene must be >= 64");
  if (structure_fraction < 0 || foliage_fraction < 0 || floater_fraction < 0) {
    throw ArgumentError("point fractions must be non-negative");
  }
  const double sum = structure_fraction + foliage_fraction + floater_fraction;
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ArgumentError("point fractions must sum to 1, got " + std::to_string(sum));
  }
  if (structure_fraction * static_cast<double>(points_per_scene) < 1.0) {
    throw ArgumentError("structure_fraction leaves no structure points");
  }
  if (jitter_scale < 0) throw ArgumentError("jitter_scale must be non-negative");
  if (scan_offset_m < 0) throw ArgumentError("scan_offset_m must be non-negative");
  if (grid_spacing_m < 50.0 + 2.0 * scan_offset_m) {
    throw ArgumentError("grid_spacing_m too small: scans of distinct scenes could "
                        "come closer than 50 m");
  }
  if (2.0 * scan_offset_m > 10.0) {
    throw ArgumentError("scan_offset_m too large: scans of one scene could be "
                        "farther than 10 m apart");
  }
}

SynthDataset generate_synthetic_dataset(const SynthConfig& cfg) {
  cfg.validate();

  const std::size_t total_scenes = cfg.n_scenes + cfg.n_test_scenes;
  const std::size_t side =
      static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(total_scenes))));

  std::size_t n_struct =
      static_cast<std::size_t>(std::llround(cfg.structure_fraction *
                                            static_cast<double>(cfg.points_per_scene)));
  std::size_t n_foliage =
      static_cast<std::size_t>(std::llround(cfg.foliage_fraction *
                                            static_cast<double>(cfg.points_per_scene)));
  n_struct = std::max<std::size_t>(1, std::min(n_struct, cfg.points_per_scene));
  n_foliage = std::min(n_foliage, cfg.points_per_scene - n_struct);
  const std::size_t n_floater = cfg.points_per_scene - n_struct - n_foliage;

  SynthDataset ds;
  for (std::size_t scene = 0; scene < total_scenes; ++scene) {
    Rng scene_rng(Rng::mix(cfg.seed, scene));
    const std::size_t n_clusters = 1 + scene_rng.below(4);
    const SceneBlueprint bp = make_blueprint(scene_rng, n_struct, n_clusters);

    const double center_n = static_cast<double>(scene / side) * cfg.grid_spacing_m;
    const double center_e = static_cast<double>(scene % side) * cfg.grid_spacing_m;

    auto& bucket = scene < cfg.n_scenes ? ds.train : ds.test;
    for (std::size_t scan = 0; scan < cfg.scans_per_scene; ++scan) {
      Rng scan_rng(Rng::mix(Rng::mix(cfg.seed, scene), scan + 1));
      Submap sm;
      sm.id = scan_id(scene, scan);
      const auto off = scan_offset(cfg, scan_rng);
      sm.northing = center_n + off[0];
      sm.easting = center_e + off[1];
      sm.cloud = render_scan(bp, cfg, n_struct, n_foliage, n_floater, scan_rng);
      bucket.push_back(std::move(sm));
    }
  }
  return ds;
}

void save_submap(const std::filesystem::path& path, const Tensor<double>& coords) {
  if (coords.rank() != 2 || coords.cols() != 3) {
    throw DimensionError("submap coordinates must be N x 3, got " + coords.shape_str());
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  for (double v : coords.values()) write_f64_le(os, v);
  if (!os) throw IoError("write failed: " + path.string());
}

Tensor<double> load_submap_coords(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  is.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::uint64_t>(is.tellg());
  is.seekg(0, std::ios::beg);
  if (bytes == 0 || bytes % 24 != 0) {
    throw FormatError("submap file " + path.string() + " has " + std::to_string(bytes) +
                      " bytes, not a positive multiple of 24");
  }
  const std::size_t n = bytes / 24;
  Tensor<double> coords({n, 3});
  for (double& v : coords.values()) v = read_f64_le(is, "coordinate");
  validate_coords(coords, path);
  return coords;
}

Tensor<double> load_benchmark_submap(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  is.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::uint64_t>(is.tellg());
  is.seekg(0, std::ios::beg);
  if (bytes != kBenchmarkPoints * 3 * 8) {
    throw FormatError("benchmark submap " + path.string() + " has " + std::to_string(bytes) +
                      " bytes, expected " + std::to_string(kBenchmarkPoints * 3 * 8));
  }
  Tensor<double> coords({kBenchmarkPoints, 3});
  for (double& v : coords.values()) v = read_f64_le(is, "coordinate");
  validate_coords(coords, path);
  return coords;
}

void save_labels(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(labels.data()),
           static_cast<std::streamsize>(labels.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

std::vector<std::uint8_t> load_labels(const std::filesystem::path& path, std::size_t n_expected) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  is.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::uint64_t>(is.tellg());
  is.seekg(0, std::ios::beg);
  if (bytes != n_expected) {
    throw FormatError("label file " + path.string() + " has " + std::to_string(bytes) +
                      " bytes, expected " + std::to_string(n_expected));
  }
  std::vector<std::uint8_t> labels(n_expected);
  is.read(reinterpret_cast<char*>(labels.data()), static_cast<std::streamsize>(n_expected));
  if (!is) throw FormatError("short read: " + path.string());
  return labels;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& e : entries) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f\t%.6f", e.northing, e.easting);
    os << e.id << '\t' << e.rel_path << '\t' << buf << '\t' << e.split << '\n';
  }
  if (!os) throw IoError("write failed: " + path.string());
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const std::size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 5) {
      throw FormatError("manifest line " + std::to_string(line_no) + " has " +
                        std::to_string(fields.size()) + " fields, expected 5");
    }
    ManifestEntry e;
    e.id = fields[0];
    e.rel_path = fields[1];
    try {
      std::size_t used = 0;
      e.northing = std::stod(fields[2], &used);
      if (used != fields[2].size()) throw std::invalid_argument("trailing");
      e.easting = std::stod(fields[3], &used);
      if (used != fields[3].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw FormatError("manifest line " + std::to_string(line_no) +
                        ": cannot parse coordinates");
    }
    e.split = fields[4];
    if (e.split != "train" && e.split != "test") {
      throw FormatError("manifest line " + std::to_string(line_no) + ": unknown split '" +
                        e.split + "'");
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

std::filesystem::path write_dataset(const SynthDataset& ds, const std::filesystem::path& out_dir) {
  const auto cloud_dir = out_dir / "clouds";
  std::filesystem::create_directories(cloud_dir);
  std::vector<ManifestEntry> entries;

  auto emit = [&](const std::vector<Submap>& maps, const char* split) {
    for (const auto& sm : maps) {
      const std::string rel = "clouds/" + sm.id + ".bin";
      save_submap(out_dir / rel, sm.cloud.coords);
      if (!sm.cloud.labels.empty()) {
        save_labels(out_dir / ("clouds/" + sm.id + ".labels"), sm.cloud.labels);
      }
      entries.push_back({sm.id, rel, sm.northing, sm.easting, split});
    }
  };
  emit(ds.train, "train");
  emit(ds.test, "test");

  const auto manifest = out_dir / "manifest.tsv";
  write_manifest(manifest, entries);
  return manifest;
}

SynthDataset load_dataset(const std::filesystem::path& manifest_path) {
  const auto base = manifest_path.parent_path();
  SynthDataset ds;
  for (const auto& e : read_manifest(manifest_path)) {
    Submap sm;
    sm.id = e.id;
    sm.northing = e.northing;
    sm.easting = e.easting;
    sm.cloud.coords = load_submap_coords(base / e.rel_path);
    auto label_path = base / e.rel_path;
    label_path.replace_extension(".labels");
    if (std::filesystem::exists(label_path)) {
      sm.cloud.labels = load_labels(label_path, sm.cloud.size());
    }
    sm.cloud.validate();
    (e.split == "train" ? ds.train : ds.test).push_back(std::move(sm));
  }
  return ds;
}

}  // namespace pcan
