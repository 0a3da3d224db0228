#pragma once

#include "convneur/grad_check.hpp"
#include "convneur/rng.hpp"
#include "convneur/tape.hpp"

#include <string>
#include <vector>

namespace convneur {

struct LocalBranchConfig {
    std::size_t kernel = 7;
    std::size_t expansion = 4;
    double norm_eps = 1e-6;

    void validate() const;
    bool operator==(const LocalBranchConfig&) const = default;
};

struct LocalBranchParams {
    Tensor dw_kernel;   // [C, k, k]
    Tensor dw_bias;     // [C]
    Tensor norm_gamma;  // [C]
    Tensor norm_beta;   // [C]
    Tensor mix_up;      // [rC, C]
    Tensor mix_up_bias;     // [rC]
    Tensor mix_down;    // [C, rC]
    Tensor mix_down_bias;   // [C]

    static LocalBranchParams init(std::size_t channels, const LocalBranchConfig& config, Rng& rng,
                                  double std = 0.02);
    // Delta kernel and a +u/-u mixing pair. On inputs the norm leaves unchanged
    // (zero mean, unit variance per position) the branch is the identity.
    static LocalBranchParams identity(std::size_t channels, const LocalBranchConfig& config);

    std::size_t channels() const { return dw_kernel.dim(0); }
    std::size_t kernel() const { return dw_kernel.dim(1); }
    std::vector<NamedTensor> named(const std::string& prefix);
};

struct BoundLocalParams {
    Var dw_kernel, dw_bias, norm_gamma, norm_beta, mix_up, mix_up_bias, mix_down, mix_down_bias;
};

BoundLocalParams bind(Tape& tape, LocalBranchParams& params);

// depthwise k x k (same padding) -> channel LayerNorm -> pointwise expand ->
// GELU -> pointwise reduce. Output has the input's shape.
Var local_forward(Var x, const BoundLocalParams& params, double norm_eps = 1e-6);

}  // namespace convneur
