#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>

#include "pcan/binio.hpp"
#include "pcan/errors.hpp"
#include "pcan/tensor.hpp"

namespace pcan {

// Self-describing container: magic, version, element width, then named
// records. All tensor records in one file share the element type; loading
// into a different precision is refused rather than silently converted.
inline constexpr char kCheckpointMagic[8] = {'P', 'C', 'A', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
  static_assert(std::is_floating_point_v<T>);
  std::map<std::string, Tensor<T>> tensors;
  std::map<std::string, std::string> texts;
};

namespace detail {

inline void write_name(std::ostream& os, const std::string& name) {
  if (name.empty() || name.size() > 4096) {
    throw ArgumentError("checkpoint record name empty or too long");
  }
  write_u32_le(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
}

inline std::string read_name(std::istream& is) {
  const std::uint32_t len = read_u32_le(is, "record name length");
  if (len == 0 || len > 4096) throw FormatError("checkpoint record name length corrupt");
  std::string name(len, '\0');
  if (!is.read(name.data(), len)) throw FormatError("unexpected end of file reading record name");
  return name;
}

template <typename T>
T read_elem(std::istream& is) {
  if constexpr (sizeof(T) == 4) {
    return static_cast<T>(read_f32_le(is, "tensor element"));
  } else {
    return static_cast<T>(read_f64_le(is, "tensor element"));
  }
}

template <typename T>
void write_elem(std::ostream& os, T v) {
  if constexpr (sizeof(T) == 4) {
    write_f32_le(os, static_cast<float>(v));
  } else {
    write_f64_le(os, static_cast<double>(v));
  }
}

}  // namespace detail

// Element width (4 or 8 bytes) recorded in a checkpoint, without loading it.
inline std::uint32_t checkpoint_precision(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw FormatError(path.string() + " is not a checkpoint file");
  }
  const std::uint32_t version = read_u32_le(is, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " unsupported, expected " +
                      std::to_string(kCheckpointVersion));
  }
  const std::uint32_t width = read_u32_le(is, "element width");
  if (width != 4 && width != 8) {
    throw FormatError("checkpoint element width " + std::to_string(width) + " corrupt");
  }
  return width;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  write_u32_le(os, kCheckpointVersion);
  write_u32_le(os, static_cast<std::uint32_t>(sizeof(T)));
  write_u64_le(os, ckpt.tensors.size() + ckpt.texts.size());
  // std::map iterates sorted, so the byte layout is deterministic.
  for (const auto& [name, t] : ckpt.tensors) {
    write_u8(os, 0);
    detail::write_name(os, name);
    write_u32_le(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d = 0; d < t.rank(); ++d) write_u64_le(os, t.dim(d));
    for (T v : t.values()) detail::write_elem<T>(os, v);
  }
  for (const auto& [name, text] : ckpt.texts) {
    write_u8(os, 1);
    detail::write_name(os, name);
    write_u64_le(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
  }
  if (!os) throw IoError("write failed: " + path.string());
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw FormatError(path.string() + " is not a checkpoint file");
  }
  const std::uint32_t version = read_u32_le(is, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " unsupported, expected " +
                      std::to_string(kCheckpointVersion));
  }
  const std::uint32_t width = read_u32_le(is, "element width");
  if (width != sizeof(T)) {
    throw FormatError("checkpoint holds " + std::to_string(width * 8) +
                      "-bit values; this run uses " + std::to_string(sizeof(T) * 8) +
                      "-bit precision — re-run with the matching precision");
  }
  const std::uint64_t n_records = read_u64_le(is, "record count");
  if (n_records > (1u << 20)) throw FormatError("checkpoint record count corrupt");

  Checkpoint<T> ckpt;
  for (std::uint64_t r = 0; r < n_records; ++r) {
    const std::uint8_t kind = read_u8(is, "record kind");
    const std::string name = detail::read_name(is);
    if (kind == 0) {
      const std::uint32_t rank = read_u32_le(is, "tensor rank");
      if (rank == 0 || rank > 8) throw FormatError("tensor rank corrupt in record " + name);
      std::vector<std::size_t> shape(rank);
      for (auto& d : shape) {
        d = read_u64_le(is, "tensor dimension");
        if (d == 0 || d > (1u << 28)) throw FormatError("tensor dimension corrupt in " + name);
      }
      Tensor<T> t(shape);
      for (T& v : t.values()) v = detail::read_elem<T>(is);
      if (!ckpt.tensors.emplace(name, std::move(t)).second) {
        throw FormatError("duplicate checkpoint record: " + name);
      }
    } else if (kind == 1) {
      const std::uint64_t len = read_u64_le(is, "text length");
      if (len > (1u << 26)) throw FormatError("text record length corrupt in " + name);
      std::string text(len, '\0');
      if (len > 0 && !is.read(text.data(), static_cast<std::streamsize>(len))) {
        throw FormatError("unexpected end of file reading text record " + name);
      }
      if (!ckpt.texts.emplace(name, std::move(text)).second) {
        throw FormatError("duplicate checkpoint record: " + name);
      }
    } else {
      throw FormatError("unknown record kind " + std::to_string(kind) + " in checkpoint");
    }
  }
  is.peek();
  if (!is.eof()) throw FormatError("checkpoint " + path.string() + " has trailing bytes");
  return ckpt;
}

}  // namespace pcan
