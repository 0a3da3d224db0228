#include "convneur/model.hpp"

#include "convneur/counters.hpp"
#include "convneur/error.hpp"
#include "convneur/ops.hpp"
#include "convneur/rng.hpp"

#include <algorithm>
#include <cmath>

namespace convneur {

namespace {

constexpr double kNormEps = 1e-6;
constexpr std::size_t kStemPatch = 4;
constexpr std::size_t kDownsamplePatch = 2;
constexpr std::size_t kInputChannels = 3;

Tensor trunc_normal(Shape shape, double std, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) {
        v = rng.truncated_normal(std);
    }
    return t;
}

NormParams make_norm(std::size_t channels) { return NormParams{Tensor({channels}, 1.0), Tensor({channels})}; }

PatchConvParams make_patch_conv(std::size_t in, std::size_t out, std::size_t patch, double std, Rng& rng) {
    return PatchConvParams{trunc_normal({out, in * patch * patch}, std, rng), Tensor({out}), make_norm(out)};
}

Var patch_conv(Tape& tape, Var x, PatchConvParams& p, std::size_t patch) {
    Var h = pointwise_conv(space_to_depth(x, patch), tape.parameter(p.weight), tape.parameter(p.bias));
    return channel_norm(h, tape.parameter(p.norm.gamma), tape.parameter(p.norm.beta), kNormEps);
}

void append(std::vector<NamedTensor>& out, std::vector<NamedTensor> more) {
    out.insert(out.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
}

}  // namespace

Model Model::build(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model model(config);
    Rng rng(seed);
    const MemoryConfig mem = config.memory_config();
    const LocalBranchConfig local = config.local_config();
    std::size_t in_channels = kInputChannels;
    for (std::size_t s = 0; s < kStageCount; ++s) {
        const std::size_t c = config.dims[s];
        StageParams stage;
        stage.entry = make_patch_conv(in_channels, c, s == 0 ? kStemPatch : kDownsamplePatch, config.init_std, rng);
        if (config.placement == Placement::per_stage) {
            stage.memory = MemoryParams::init(c, mem, rng, config.init_std, config.memory_qkv_std);
        }
        for (std::size_t b = 0; b < config.depths[s]; ++b) {
            BlockParams block{LocalBranchParams::init(c, local, rng, config.init_std),
                              FusionParams::init(c, config.fusion.mode, rng, config.init_std),
                              std::nullopt};
            if (config.placement == Placement::per_layer) {
                block.memory = MemoryParams::init(c, mem, rng, config.init_std, config.memory_qkv_std);
            }
            stage.blocks.push_back(std::move(block));
        }
        model.stages_.push_back(std::move(stage));
        in_channels = c;
    }
    model.head_.norm = make_norm(in_channels);
    model.head_.weight = trunc_normal({config.num_classes, in_channels}, config.init_std, rng);
    model.head_.bias = Tensor({config.num_classes});
    return model;
}

std::vector<NamedTensor> Model::parameters() {
    std::vector<NamedTensor> out;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
        StageParams& stage = stages_[s];
        const std::string prefix = "stages." + std::to_string(s) + ".";
        const std::string entry = prefix + (s == 0 ? "stem." : "downsample.");
        out.push_back({entry + "weight", &stage.entry.weight});
        out.push_back({entry + "bias", &stage.entry.bias});
        out.push_back({entry + "norm_gamma", &stage.entry.norm.gamma});
        out.push_back({entry + "norm_beta", &stage.entry.norm.beta});
        if (stage.memory) {
            append(out, stage.memory->named(prefix + "memory."));
        }
        for (std::size_t b = 0; b < stage.blocks.size(); ++b) {
            BlockParams& block = stage.blocks[b];
            const std::string bp = prefix + "blocks." + std::to_string(b) + ".";
            append(out, block.local.named(bp + "local."));
            append(out, block.fusion.named(bp + "fusion."));
            if (block.memory) {
                append(out, block.memory->named(bp + "memory."));
            }
        }
    }
    out.push_back({"head.norm_gamma", &head_.norm.gamma});
    out.push_back({"head.norm_beta", &head_.norm.beta});
    out.push_back({"head.weight", &head_.weight});
    out.push_back({"head.bias", &head_.bias});
    return out;
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (const NamedTensor& p : const_cast<Model*>(this)->parameters()) {
        n += p.tensor->numel();
    }
    return n;
}

std::size_t Model::memory_module_count() const {
    std::size_t n = 0;
    for (const StageParams& stage : stages_) {
        n += stage.memory ? 1 : 0;
        for (const BlockParams& block : stage.blocks) {
            n += block.memory ? 1 : 0;
        }
    }
    return n;
}

void Model::zero_grad() {
    for (const NamedTensor& p : parameters()) {
        p.tensor->zero_grad();
    }
}

Var Model::forward(Tape& tape, const Tensor& image, bool training, std::uint64_t seed, ForwardTrace* trace) {
    if (image.rank() != 3 || image.dim(0) != kInputChannels) {
        throw ConfigError("forward expects a [3, H, W] image, got " + shape_to_string(image.shape()));
    }
    if (image.dim(1) % 32 != 0 || image.dim(2) % 32 != 0) {
        throw ConfigError("input resolution " + std::to_string(image.dim(1)) + "x" + std::to_string(image.dim(2)) +
                          " is not divisible by 32");
    }
    const MemoryConfig mem = config_.memory_config();
    const std::size_t total_blocks = config_.block_count();
    const double max_rate = config_.fusion.drop_path_rate;
    if (trace) {
        trace->stages.assign(kStageCount, StageTrace{});
    }

    Var x = tape.constant_ref(image);
    std::size_t block_index = 0;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
        StageParams& stage = stages_[s];
        {
            CostScope scope(CostCategory::other);
            x = patch_conv(tape, x, stage.entry, s == 0 ? kStemPatch : kDownsamplePatch);
        }
        if (trace) {
            trace->stages[s].input = x.value();
        }
        Var stage_g;
        if (stage.memory) {
            BoundMemoryParams bound = bind(tape, *stage.memory);
            stage_g = memory_branch(x, bound, mem);
        }
        for (std::size_t b = 0; b < stage.blocks.size(); ++b, ++block_index) {
            BlockParams& block = stage.blocks[b];
            Var g;
            if (block.memory) {
                BoundMemoryParams bound = bind(tape, *block.memory);
                g = memory_branch(x, bound, mem);
            } else if (stage_g.valid() && (b == 0 || config_.gate_scope == GateScope::stage)) {
                g = stage_g;
            }
            BoundLocalParams local = bind(tape, block.local);
            Var f_loc = local_forward(x, local);
            BoundFusionParams fusion = bind(tape, block.fusion);
            const double rate =
                total_blocks > 1 ? max_rate * static_cast<double>(block_index) / static_cast<double>(total_blocks - 1)
                                 : max_rate;
            if (trace && g.valid() && trace->stages[s].gate.numel() == 0 &&
                config_.fusion.mode == FusionMode::gating) {
                Tape scratch(false);
                Var gv = scratch.constant_ref(g.value());
                Var bias = scratch.constant_ref(block.fusion.gate_bias);
                StageTrace& st = trace->stages[s];
                st.gate = gate(gv, bias, config_.fusion.channel_shared_gate).value();
                const Tensor& f = f_loc.value();
                const std::size_t c = f.dim(0), hw = f.dim(1) * f.dim(2);
                st.influence = Tensor({1, f.dim(1), f.dim(2)});
                for (std::size_t ch = 0; ch < c; ++ch) {
                    for (std::size_t p = 0; p < hw; ++p) {
                        st.influence[p] += std::abs(st.gate[ch * hw + p] * f[ch * hw + p] - f[ch * hw + p]);
                    }
                }
            }
            x = fuse(x, f_loc, g, fusion, config_.fusion, training, mix_seed(seed, block_index), rate);
        }
        if (trace) {
            trace->stages[s].output = x.value();
        }
    }

    CostScope scope(CostCategory::other);
    Var pooled = global_avg_pool(x);
    pooled = layer_norm(pooled, tape.parameter(head_.norm.gamma), tape.parameter(head_.norm.beta), kNormEps);
    return linear(pooled, tape.parameter(head_.weight), tape.parameter(head_.bias));
}

Tensor Model::predict_one(const Tensor& image) {
    Tape tape(false);
    return forward(tape, image, false).value();
}

Tensor Model::predict(const Tensor& images) {
    if (images.rank() != 4) {
        throw ConfigError("predict expects [B, 3, H, W], got " + shape_to_string(images.shape()));
    }
    const std::size_t batch = images.dim(0), k = config_.num_classes;
    Tensor out({batch, k});
    for (std::size_t b = 0; b < batch; ++b) {
        const Tensor logits = predict_one(batch_item(images, b));
        std::copy(logits.data().begin(), logits.data().end(), out.data().begin() + static_cast<long>(b * k));
    }
    return out;
}

Tensor batch_item(const Tensor& batch, std::size_t index) {
    if (batch.rank() < 2 || index >= batch.dim(0)) {
        throw ConfigError("batch_item: index " + std::to_string(index) + " out of range for " +
                          shape_to_string(batch.shape()));
    }
    Shape shape(batch.shape().begin() + 1, batch.shape().end());
    const std::size_t per = shape_numel(shape);
    std::vector<double> values(batch.data().begin() + static_cast<long>(index * per),
                               batch.data().begin() + static_cast<long>((index + 1) * per));
    return Tensor(std::move(shape), std::move(values));
}

}  // namespace convneur
