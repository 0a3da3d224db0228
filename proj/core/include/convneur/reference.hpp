#pragma once

#include "convneur/memory.hpp"
#include "convneur/tensor.hpp"

namespace convneur::reference {

// Straight-line implementations used as oracles. They share no code with the
// tape ops: plain loops over raw values, written from the recurrence directly.

Tensor depthwise_conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t padding);
Tensor pointwise_conv(const Tensor& x, const Tensor& weight);

// Full memory branch: bottleneck, chunked retrieve/update rollout, reassembly
// and output projection. Returns G [C, H, W].
Tensor memory_rollout(const Tensor& x, const MemoryParams& params, const MemoryConfig& config);

}  // namespace convneur::reference
