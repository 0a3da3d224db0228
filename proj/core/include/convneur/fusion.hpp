#pragma once

#include "convneur/grad_check.hpp"
#include "convneur/rng.hpp"
#include "convneur/tape.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace convneur {

enum class FusionMode { gating, addition, concatenation };

std::string_view fusion_mode_name(FusionMode mode) noexcept;
FusionMode parse_fusion_mode(std::string_view text);

struct FusionConfig {
    FusionMode mode = FusionMode::gating;
    double drop_path_rate = 0.0;
    // Average G over channels before the sigmoid so one spatial gate is shared by all channels.
    bool channel_shared_gate = false;

    void validate() const;
    bool operator==(const FusionConfig&) const = default;
};

struct FusionParams {
    Tensor gate_bias;                     // [C], zero at init
    std::optional<Tensor> concat_reduce;  // [C, 2C], concatenation mode only

    // The reduce starts as [I | N(0, std)] so the local half passes through.
    static FusionParams init(std::size_t channels, FusionMode mode, Rng& rng, double std = 0.02);
    std::vector<NamedTensor> named(const std::string& prefix);
};

struct BoundFusionParams {
    Var gate_bias;
    Var concat_reduce;  // invalid unless concatenation
};

BoundFusionParams bind(Tape& tape, FusionParams& params);

// sigmoid(g + gate_bias), bias broadcast over positions.
Var gate(Var g, Var gate_bias, bool channel_shared = false);

// Per-sample keep decision used by drop_path.
bool drop_path_keep(double rate, std::uint64_t seed) noexcept;

// x is one sample.
Var drop_path(Var x, double rate, bool training, std::uint64_t seed);
// x is [B, ...]; sample b uses mix_seed(seed, b).
Var drop_path_batch(Var x, double rate, bool training, std::uint64_t seed);

// Residual update. `g` may be invalid when the block has no global map, in
// which case every mode reduces to x + drop_path(f_loc).
Var fuse(Var x, Var f_loc, Var g, const BoundFusionParams& params, const FusionConfig& config, bool training,
         std::uint64_t seed, double drop_rate);

}  // namespace convneur
