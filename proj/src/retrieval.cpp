#include "pcan/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <sstream>

#include "pcan/binio.hpp"
#include "pcan/errors.hpp"

namespace pcan {

void DescriptorDB::validate() const {
  if (descriptors.rank() != 2) {
    throw DimensionError("descriptor db must be rank 2, got " + descriptors.shape_str());
  }
  if (meta.size() != descriptors.rows()) {
    throw ContractError("descriptor db: " + std::to_string(descriptors.rows()) +
                        " rows but " + std::to_string(meta.size()) + " metadata entries");
  }
  for (std::size_t i = 0; i < descriptors.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < descriptors.cols(); ++j) s += descriptors(i, j) * descriptors(i, j);
    if (std::abs(std::sqrt(s) - 1.0) > 1e-6) {
      throw ValidationError("descriptor row " + std::to_string(i) + " has norm " +
                            std::to_string(std::sqrt(s)) + ", expected 1");
    }
  }
}

std::vector<std::size_t> rank(std::span<const double> query, const DescriptorDB& db) {
  if (db.meta.empty()) throw ArgumentError("rank: empty database");
  if (query.size() != db.descriptors.cols()) {
    throw DimensionError("rank: query has " + std::to_string(query.size()) +
                         " dims, db has " + std::to_string(db.descriptors.cols()));
  }
  const std::size_t m = db.descriptors.rows();
  std::vector<double> dist(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < query.size(); ++j) {
      const double d = query[j] - db.descriptors(i, j);
      s += d * d;
    }
    dist[i] = s;
  }
  std::vector<std::size_t> order(m);
  for (std::size_t i = 0; i < m; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
  return order;
}

RecallCurve recall_curve(const std::vector<SubmapRef>& query_meta,
                         const Tensor<double>& query_desc, const DescriptorDB& db,
                         std::size_t max_n, std::size_t n_threads) {
  if (db.meta.empty()) throw ArgumentError("recall: empty database");
  if (query_meta.size() != query_desc.rows()) {
    throw ContractError("recall: query metadata/descriptor count mismatch");
  }
  if (max_n == 0) throw ArgumentError("recall: max_n must be positive");
  max_n = std::min(max_n, db.meta.size());

  const std::size_t m = db.meta.size();
  const std::size_t top1pct_n = (m + 99) / 100;

  // first_hit[q]: rank position of the first correct match, or npos.
  const std::size_t npos = static_cast<std::size_t>(-1);
  std::vector<std::size_t> first_hit(query_meta.size(), npos);

  parallel_for(query_meta.size(), n_threads, [&](std::size_t q) {
    const std::span<const double> desc =
        query_desc.values().subspan(q * query_desc.cols(), query_desc.cols());
    const auto order = rank(desc, db);
    std::size_t pos = 0;
    for (std::size_t idx : order) {
      if (db.meta[idx].id == query_meta[q].id) continue;  // the query itself
      if (utm_distance(db.meta[idx], query_meta[q]) <= kMatchRadiusM) {
        first_hit[q] = pos;
        break;
      }
      ++pos;
    }
  });

  RecallCurve curve;
  curve.n_queries = query_meta.size();
  curve.top1pct_n = top1pct_n;
  curve.recall_at.assign(max_n, 0.0);
  std::size_t top1pct_hits = 0;
  for (std::size_t hit : first_hit) {
    if (hit == npos) continue;
    if (hit < max_n) curve.recall_at[hit] += 1.0;
    if (hit < top1pct_n) ++top1pct_hits;
  }
  // Prefix-sum: a hit at position p counts for every n > p.
  double acc = 0.0;
  for (std::size_t n = 0; n < max_n; ++n) {
    acc += curve.recall_at[n];
    curve.recall_at[n] = acc / static_cast<double>(query_meta.size());
  }
  curve.recall_top1pct = static_cast<double>(top1pct_hits) / static_cast<double>(query_meta.size());
  return curve;
}

void write_recall_curve(const std::filesystem::path& path, const RecallCurve& curve) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "n\trecall\n";
  char buf[64];
  for (std::size_t i = 0; i < curve.recall_at.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu\t%.6f\n", i + 1, curve.recall_at[i]);
    os << buf;
  }
  const double r1 = curve.recall_at.empty() ? 0.0 : curve.recall_at.front();
  std::snprintf(buf, sizeof buf, "summary\trecall@1=%.6f\trecall@top1pct=%.6f\n", r1,
                curve.recall_top1pct);
  os << buf;
  if (!os) throw IoError("write failed: " + path.string());
}

void write_descriptors(const std::filesystem::path& path, const Tensor<double>& m) {
  if (m.rank() != 2) throw DimensionError("descriptor matrix must be rank 2");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_u64_le(os, m.rows());
  write_u64_le(os, m.cols());
  for (double v : m.values()) write_f64_le(os, v);
  if (!os) throw IoError("write failed: " + path.string());
}

Tensor<double> read_descriptors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  const std::uint64_t rows = read_u64_le(is, "descriptor row count");
  const std::uint64_t cols = read_u64_le(is, "descriptor column count");
  if (rows == 0 || cols == 0 || rows > (1u << 24) || cols > (1u << 24)) {
    throw FormatError("descriptor file " + path.string() + " declares implausible shape " +
                      std::to_string(rows) + " x " + std::to_string(cols));
  }
  Tensor<double> m({rows, cols});
  for (double& v : m.values()) v = read_f64_le(is, "descriptor value");
  // Trailing bytes mean the shape prefix lied about the payload.
  is.peek();
  if (!is.eof()) throw FormatError("descriptor file " + path.string() + " has trailing bytes");
  return m;
}

void write_descriptor_meta(const std::filesystem::path& path,
                           const std::vector<SubmapRef>& meta) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  char buf[64];
  for (const auto& r : meta) {
    std::snprintf(buf, sizeof buf, "%.6f\t%.6f", r.northing, r.easting);
    os << r.id << '\t' << buf << '\n';
  }
  if (!os) throw IoError("write failed: " + path.string());
}

std::vector<SubmapRef> read_descriptor_meta(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<SubmapRef> meta;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    SubmapRef r;
    std::string n, e;
    if (!std::getline(ss, r.id, '\t') || !std::getline(ss, n, '\t') || !std::getline(ss, e)) {
      throw FormatError("descriptor metadata line " + std::to_string(line_no) + " malformed");
    }
    try {
      r.northing = std::stod(n);
      r.easting = std::stod(e);
    } catch (const std::exception&) {
      throw FormatError("descriptor metadata line " + std::to_string(line_no) +
                        ": cannot parse coordinates");
    }
    meta.push_back(std::move(r));
  }
  return meta;
}

}  // namespace pcan
