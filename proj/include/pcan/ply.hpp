#pragma once

#include <filesystem>

#include "pcan/tensor.hpp"

namespace pcan {

// ASCII PLY point cloud with a per-vertex scalar property "attention".
// Coordinates are N x 3; scores are N values in (0, 1).
void write_attention_ply(const std::filesystem::path& path, const Tensor<double>& coords,
                         const Tensor<double>& attention);

}  // namespace pcan
