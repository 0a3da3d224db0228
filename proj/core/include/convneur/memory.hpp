#pragma once

#include "convneur/grad_check.hpp"
#include "convneur/rng.hpp"
#include "convneur/tape.hpp"

#include <optional>
#include <string>
#include <vector>

namespace convneur {

// Replaces generated coefficients with constants. Used to freeze the memory
// (step = 0) or to pin momentum/decay in invariant checks.
struct CoefficientOverride {
    std::optional<double> step;
    std::optional<double> momentum;
    std::optional<double> decay;
    bool operator==(const CoefficientOverride&) const = default;
};

struct MemoryConfig {
    std::size_t c_mem = 16;
    std::size_t chunk_len = 16;
    std::size_t heads = 4;
    double base_step = 1.0;
    double norm_cap = 1e3;
    CoefficientOverride force;

    std::size_t head_dim() const { return c_mem / heads; }
    void validate() const;
    bool operator==(const MemoryConfig&) const = default;
};

// Outer ("slow") weights of one memory module instance.
struct MemoryParams {
    Tensor proj_in;   // [C_m, C]
    Tensor w_q;       // [C_m, C_m]
    Tensor w_k;       // [C_m, C_m]
    Tensor w_v;       // [C_m, C_m]
    // Coefficient generators: affine maps from [pooled chunk (C_m), surprise loss].
    Tensor gen_step_w;      // [1, C_m + 1]
    Tensor gen_step_b;      // [1]
    Tensor gen_momentum_w;  // [1, C_m + 1]
    Tensor gen_momentum_b;  // [1]
    Tensor gen_decay_w;     // [1, C_m + 1]
    Tensor gen_decay_b;     // [1]
    Tensor proj_out;  // [C, C_m]

    // Projections drawn from a truncated normal, generators zero.
    static MemoryParams init(std::size_t channels, const MemoryConfig& config, Rng& rng, double proj_std = 0.02,
                             double qkv_std = 0.02);

    std::size_t channels() const { return proj_in.dim(1); }
    std::vector<NamedTensor> named(const std::string& prefix);
};

struct BoundMemoryParams {
    Var proj_in, w_q, w_k, w_v;
    Var gen_step_w, gen_step_b, gen_momentum_w, gen_momentum_b, gen_decay_w, gen_decay_b;
    Var proj_out;
};

BoundMemoryParams bind(Tape& tape, MemoryParams& params);

// Fast weights and momentum, both [H_n, d, d].
struct MemoryState {
    Var fast_weights;
    Var momentum;
};

MemoryState initial_state(Tape& tape, const MemoryConfig& config);

struct ChunkLayout {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t token_count = 0;
    std::size_t chunk_len = 0;
    std::size_t num_chunks = 0;
    std::size_t pad_count = 0;

    static ChunkLayout make(std::size_t height, std::size_t width, std::size_t chunk_len);
    // Unpadded tokens in chunk t.
    std::size_t valid_in_chunk(std::size_t t) const;
};

struct Chunked {
    std::vector<Var> chunks;  // each [L, C_m], raster order, tail zero-padded
    ChunkLayout layout;
};

struct Qkv {
    Var q, k, v;  // each [H_n, rows, d]
};

struct Surprise {
    Var loss;  // [1]
    Var grad;  // [H_n, d, d]
};

struct Coefficients {
    Var theta;  // step size, > 0
    Var eta;    // momentum, in (0, 1)
    Var alpha;  // decay, in (0, 1)
};

// Per-chunk record of a rollout.
struct ChunkTrace {
    std::size_t valid_tokens = 0;
    double loss = 0.0;
    double theta = 0.0;
    double eta = 0.0;
    double alpha = 0.0;
    Tensor fast_in;  // fast weights the chunk's queries read from
};

struct MemoryTrace {
    std::vector<ChunkTrace> chunks;
    Tensor retrieved;  // reassembled [C_m, H, W] before proj_out
};

Var bottleneck(Var x, Var proj_in);
Chunked chunk(Var x_mem, std::size_t chunk_len);
Qkv qkv(Var chunk_tokens, Var w_q, Var w_k, Var w_v, std::size_t heads);
Var retrieve(const MemoryState& state, Var q);
// Rows at or beyond `valid_tokens` are masked out of the loss and gradient.
Surprise surprise(const MemoryState& state, Var k, Var v, std::size_t valid_tokens);
Coefficients gen_coeffs(Var chunk_tokens, Var loss, std::size_t valid_tokens, const BoundMemoryParams& params,
                        const MemoryConfig& config);
MemoryState update(const MemoryState& state, Var grad, const Coefficients& coeffs, double norm_cap,
                   std::size_t chunk_index);
// Accepts outputs with either L rows or exactly the chunk's valid rows.
Var reassemble(const std::vector<Var>& outputs, const ChunkLayout& layout);

// x [C, H, W] -> global map G [C, H, W]. State starts at zero on every call.
Var memory_branch(Var x, const BoundMemoryParams& params, const MemoryConfig& config, MemoryTrace* trace = nullptr);

}  // namespace convneur
