#pragma once

#include "convneur/model.hpp"

#include <cstdint>
#include <filesystem>

namespace convneur {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    Model model;
    std::uint64_t step = 0;
    std::uint64_t rng_state = 0;
};

// Little-endian: "CNUR", u32 version, u32 config length, config text, u64 step,
// u64 rng state, u32 tensor count, then per tensor u32 name length, name,
// u32 rank, u64 extents, f64 values.
void save_checkpoint(Model& model, const std::filesystem::path& path, std::uint64_t step = 0,
                     std::uint64_t rng_state = 0);

// Throws CheckpointError; no partially loaded model escapes.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace convneur
