#pragma once

#include "twofold/nn/network.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace twofold::nn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

using Metadata = std::map<std::string, std::string>;

struct Checkpoint {
  Network network;
  Metadata metadata;
};

/// Where one layer's parameters live inside a serialized checkpoint.
struct ParameterRange {
  std::string node;
  std::size_t layer = 0;
  std::size_t offset = 0;  // first byte of the weights
  std::size_t length = 0;  // weights then bias, 8 bytes per value
  bool trainable = false;
};

// Byte layout is described in docs/checkpoint_format.md.
std::string serialize_checkpoint(const Network& net, const Metadata& metadata = {});
Checkpoint deserialize_checkpoint(std::string_view bytes);
std::vector<ParameterRange> parameter_ranges(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Network& net,
                     const Metadata& metadata = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Concatenated little-endian parameter bytes of the named nodes, in the
/// order given. Used for freeze assertions.
std::string parameter_bytes(const Network& net, const std::vector<std::string>& nodes);

/// Same bytes read straight out of a serialized checkpoint.
std::string parameter_bytes(std::string_view checkpoint_bytes, const std::vector<std::string>& nodes);

/// Short content id: first 16 hex digits of the SHA-256 of the bytes.
std::string checkpoint_id(std::string_view checkpoint_bytes);

}  // namespace twofold::nn
