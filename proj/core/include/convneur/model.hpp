#pragma once

#include "convneur/fusion.hpp"
#include "convneur/local_branch.hpp"
#include "convneur/memory.hpp"
#include "convneur/model_config.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace convneur {

struct NormParams {
    Tensor gamma;
    Tensor beta;
};

// space_to_depth(b) followed by a pointwise projection and a channel norm;
// equivalent to a b x b stride-b convolution plus norm.
struct PatchConvParams {
    Tensor weight;  // [C_out, C_in * b * b]
    Tensor bias;    // [C_out]
    NormParams norm;
};

struct BlockParams {
    LocalBranchParams local;
    FusionParams fusion;
    std::optional<MemoryParams> memory;  // per_layer placement
};

struct StageParams {
    PatchConvParams entry;  // stem for stage 0, downsample otherwise
    std::optional<MemoryParams> memory;  // per_stage placement
    std::vector<BlockParams> blocks;
};

struct HeadParams {
    NormParams norm;
    Tensor weight;  // [num_classes, C_3]
    Tensor bias;
};

// Per-stage tensors captured during a forward pass for inspection.
struct StageTrace {
    Tensor gate;    // [C, H, W] gate of the stage's first gated block; empty if none
    Tensor influence;  // [1, H, W] channel sum of |A * F_loc - F_loc| for that block
    Tensor input;   // stage input after the stem / downsample
    Tensor output;  // stage output
};

struct ForwardTrace {
    std::vector<StageTrace> stages;
};

class Model {
public:
    static Model build(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const noexcept { return config_; }

    // Every parameter with a stable, hierarchical name, in checkpoint order.
    std::vector<NamedTensor> parameters();
    std::size_t parameter_count() const;
    std::size_t memory_module_count() const;

    // One image [3, H, W] -> logits [num_classes]. `seed` drives drop-path in training mode.
    Var forward(Tape& tape, const Tensor& image, bool training, std::uint64_t seed = 0,
                ForwardTrace* trace = nullptr);

    // Evaluation-mode logits [B, num_classes] for images [B, 3, H, W].
    Tensor predict(const Tensor& images);
    // Logits for a single image without building a gradient tape.
    Tensor predict_one(const Tensor& image);

    void zero_grad();

    std::vector<StageParams>& stages() noexcept { return stages_; }
    HeadParams& head() noexcept { return head_; }

private:
    explicit Model(ModelConfig config) : config_(std::move(config)) {}

    ModelConfig config_;
    std::vector<StageParams> stages_;
    HeadParams head_;
};

// Slice b of a [B, ...] tensor.
Tensor batch_item(const Tensor& batch, std::size_t index);

}  // namespace convneur
