#include "pcan/ply.hpp"

#include <cstdio>
#include <fstream>

#include "pcan/errors.hpp"

namespace pcan {

void write_attention_ply(const std::filesystem::path& path, const Tensor<double>& coords,
                         const Tensor<double>& attention) {
  if (coords.rank() != 2 || coords.cols() != 3) {
    throw DimensionError("ply: coordinates must be N x 3, got " + coords.shape_str());
  }
  const std::size_t n = coords.rows();
  if (attention.size() != n) {
    throw DimensionError("ply: " + std::to_string(n) + " vertices but " +
                         std::to_string(attention.size()) + " attention values");
  }

  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "ply\n"
     << "format ascii 1.0\n"
     << "element vertex " << n << "\n"
     << "property float x\n"
     << "property float y\n"
     << "property float z\n"
     << "property float attention\n"
     << "end_header\n";
  char buf[128];
  const auto a = attention.values();
  for (std::size_t i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof buf, "%.8g %.8g %.8g %.8g\n", coords(i, 0), coords(i, 1),
                  coords(i, 2), a[i]);
    os << buf;
  }
  if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace pcan
