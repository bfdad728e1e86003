#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "divctl/tensor.hpp"

namespace divctl {

// File layout (little-endian):
//   "DIVC" | u32 version | 32-byte config digest | u64 step | u32 block count
//   per block: u32 name length | name | u32 kind | u32 ndim | u64 dims[ndim]
//              | u64 payload bytes | u32 CRC-32 of (name, kind, dims, payload) | payload
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class BlockKind : std::uint32_t { f64 = 0, text = 1, u64 = 2 };

struct CheckpointBlock {
    std::string name;
    BlockKind kind = BlockKind::f64;
    Shape shape;
    std::vector<double> f64;
    std::string text;
    std::vector<std::uint64_t> u64;
};

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::array<std::uint8_t, 32> config_digest{};
    std::uint64_t step = 0;
    std::vector<CheckpointBlock> blocks;

    const CheckpointBlock* find(const std::string& name) const;
    // Throws LoadError when missing or of another kind.
    const CheckpointBlock& get(const std::string& name, BlockKind kind) const;

    void put_f64(std::string name, Shape shape, std::span<const double> values);
    void put_text(std::string name, std::string text);
    void put_u64(std::string name, std::vector<std::uint64_t> values);
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
// Throws LoadError naming the offending block on any inconsistency.
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

// Writes a sibling temp file, then renames it over `path`.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
// Throws NotFoundError if the file is absent, LoadError if it is malformed.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace divctl
