#pragma once

#include "convneur/fusion.hpp"
#include "convneur/local_branch.hpp"
#include "convneur/memory.hpp"

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace convneur {

enum class Placement { none, per_stage, per_layer };

// Which blocks of a per-stage model are modulated by the stage's global map.
enum class GateScope { stage, first_block };

std::string_view placement_name(Placement placement) noexcept;
Placement parse_placement(std::string_view text);
std::string_view gate_scope_name(GateScope scope) noexcept;
GateScope parse_gate_scope(std::string_view text);

inline constexpr std::size_t kStageCount = 4;

struct ModelConfig {
    std::string name = "custom";
    std::array<std::size_t, kStageCount> depths{2, 2, 6, 2};
    std::array<std::size_t, kStageCount> dims{40, 80, 160, 320};
    std::size_t c_mem = 80;
    std::size_t chunk_len = 196;
    std::size_t heads = 4;
    double base_step = 1.0;
    double norm_cap = 1e3;
    Placement placement = Placement::per_stage;
    GateScope gate_scope = GateScope::stage;
    FusionConfig fusion{FusionMode::gating, 0.1, false};
    std::size_t num_classes = 1000;
    std::size_t image_height = 224;
    std::size_t image_width = 224;
    std::size_t kernel = 7;
    std::size_t expansion = 4;
    double init_std = 0.02;
    double memory_qkv_std = 0.02;

    // Throws ConfigError naming the first violated invariant.
    void validate() const;

    MemoryConfig memory_config() const;
    LocalBranchConfig local_config() const;
    std::size_t block_count() const;
    std::size_t memory_module_count() const;

    // INI text with a [model] section; from_text accepts any subset of keys
    // on top of the defaults (or of `base`).
    std::string to_text() const;
    static ModelConfig from_text(const std::string& text);
    static ModelConfig from_text(const std::string& text, const ModelConfig& base);

    // M1, M2, M3, M4, micro.
    static ModelConfig preset(std::string_view name);
    static std::vector<std::string> preset_names();

    bool operator==(const ModelConfig&) const = default;
};

// Applies key = value pairs (model keys only) on top of `config`. Unknown keys are errors.
void apply_model_setting(ModelConfig& config, const std::string& key, const std::string& value);
std::vector<std::string> model_setting_keys();

}  // namespace convneur
