#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "xmgan/nn.hpp"

// Checkpoint container, all integers and floats little-endian:
//
//   magic    8 bytes  "XMGANCK\0"
//   version  u32      (currently 1)
//   config   u64      fingerprint of the configuration that produced it
//   step     u64
//   count    u32      number of entries, then per entry:
//     name_len u32, name bytes, ndim u32, dims u64[ndim], data f64[prod(dims)]
namespace xmgan {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint64_t fingerprint = 0;
  std::uint64_t step = 0;
  ParamList entries;

  const Tensor* find(const std::string& name) const;
};

std::string encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::string_view bytes);  // ParseError with byte offset

// Writes to a temporary file and renames, so a crash never leaves a partial file.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies stored values into `dest` by name. Missing names or shape mismatches
// throw ConfigError.
void restore_tensors(const ParamList& dest, const Checkpoint& ck);

std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace xmgan
