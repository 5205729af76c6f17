#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "pcan/dataset.hpp"
#include "pcan/loss.hpp"
#include "pcan/model.hpp"
#include "pcan/tensor.hpp"
#include "pcan/threading.hpp"

namespace pcan {

// A retrieved match is geographically correct within this many meters.
inline constexpr double kMatchRadiusM = 25.0;

struct DescriptorDB {
  Tensor<double> descriptors = Tensor<double>::zeros({1, 1});  // M x dim, unit rows
  std::vector<SubmapRef> meta;                                 // length M

  // Row norms must be 1 within 1e-6 and metadata must line up.
  void validate() const;
};

// Indices of db rows by ascending squared L2 distance to the query; equal
// distances resolve by ascending index.
std::vector<std::size_t> rank(std::span<const double> query, const DescriptorDB& db);

struct RecallCurve {
  std::vector<double> recall_at;  // recall_at[i] = recall@(i+1)
  std::size_t top1pct_n = 0;      // ceil(M/100)
  double recall_top1pct = 0.0;
  std::size_t n_queries = 0;
};

// Fraction of queries with a correct match (<= 25 m) in the top n. A db entry
// with the query's own id is excluded from that query's ranking.
RecallCurve recall_curve(const std::vector<SubmapRef>& query_meta,
                         const Tensor<double>& query_desc, const DescriptorDB& db,
                         std::size_t max_n, std::size_t n_threads = 1);

// Text form: "n<TAB>recall" header, one row per n, then a summary line with
// recall@1 and recall@top1%.
void write_recall_curve(const std::filesystem::path& path, const RecallCurve& curve);

// Descriptor matrix file: rows u64, cols u64, then row-major 64-bit
// little-endian reals.
void write_descriptors(const std::filesystem::path& path, const Tensor<double>& m);
Tensor<double> read_descriptors(const std::filesystem::path& path);

// Sidecar metadata for a descriptor file: id, northing, easting per row.
void write_descriptor_meta(const std::filesystem::path& path,
                           const std::vector<SubmapRef>& meta);
std::vector<SubmapRef> read_descriptor_meta(const std::filesystem::path& path);

inline std::vector<SubmapRef> submap_refs(const std::vector<Submap>& maps) {
  std::vector<SubmapRef> refs;
  refs.reserve(maps.size());
  for (const auto& m : maps) refs.push_back({m.id, m.northing, m.easting});
  return refs;
}

// One forward pass per submap; rows are independent, so the loop parallelizes
// without affecting the result.
template <typename T>
Tensor<double> embed_submaps(const PcanModel<T>& model, const std::vector<Submap>& maps,
                             std::size_t n_threads = 1) {
  const std::size_t dim = VladConfig::output_dim;
  Tensor<double> out = Tensor<double>::zeros({maps.size(), dim});
  parallel_for(maps.size(), n_threads, [&](std::size_t i) {
    const auto cloud = cloud_cast<T>(maps[i].cloud);
    const Tensor<T> d = model.descriptor(cloud);
    for (std::size_t j = 0; j < dim; ++j) out(i, j) = static_cast<double>(d(j));
  });
  return out;
}

template <typename T>
DescriptorDB build_database(const PcanModel<T>& model, const std::vector<Submap>& maps,
                            std::size_t n_threads = 1) {
  DescriptorDB db;
  db.descriptors = embed_submaps(model, maps, n_threads);
  db.meta = submap_refs(maps);
  db.validate();
  return db;
}

}  // namespace pcan
