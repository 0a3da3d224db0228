#pragma once

#include "convneur/counters.hpp"
#include "convneur/model.hpp"

#include <array>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

namespace convneur {

// Multiply-accumulates per category. For the linear memory, the memory terms are
//   bottleneck: 2 * C * C_m * HW        (proj_in and proj_out)
//   inner:      HW * (3 C_m^2 + 3 C_m d) (qkv, retrieval, surprise residual and gradient)
//   chunk:      T * 3 (C_m + 1)          (coefficient generators)
// Elementwise work (gates, the state update itself, norms, activations) is not counted.
struct FlopsReport {
    using Counts = std::array<std::uint64_t, kCostCategoryCount>;

    std::vector<Counts> stages;  // stem / downsample included in their stage's `other`
    Counts head{};
    std::size_t height = 0;
    std::size_t width = 0;

    std::uint64_t category(CostCategory c) const;
    // mem_bottleneck + mem_inner: the part that is linear in HW.
    std::uint64_t memory_linear() const;
    // All memory categories.
    std::uint64_t memory_total() const;
    std::uint64_t total() const;
    double giga() const { return static_cast<double>(total()) * 1e-9; }
};

FlopsReport count_flops(const ModelConfig& config, std::size_t height, std::size_t width);

// Counts the MACs actually executed by an eval-mode forward pass of `model` on `image`.
FlopsReport instrumented_count(Model& model, const Tensor& image);

struct FlopsComparison {
    bool within_tolerance = true;
    double worst_relative = 0.0;
    CostCategory worst_category = CostCategory::other;
    std::string diagnostic;
};

// Per-category relative difference |a - b| / max(1, a), maximized.
FlopsComparison compare_flops(const FlopsReport& analytic, const FlopsReport& measured, double tolerance = 0.01);

// Dense self-attention reference at 16 x 16 patching: (HW / 256)^2 * C, with C the widest stage.
double attention_reference(const ModelConfig& config, std::size_t height, std::size_t width);

struct SweepRow {
    std::size_t resolution = 0;
    FlopsReport report;
    double attention_ref = 0.0;
    double wall_ms = 0.0;  // median forward time; 0 when timing is disabled
};

struct SweepOptions {
    bool time_forward = true;
    std::size_t repeats = 5;
    std::size_t warmup = 1;
    std::uint64_t seed = 0;
};

std::vector<SweepRow> scaling_sweep(const ModelConfig& config, const std::vector<std::size_t>& resolutions,
                                    const SweepOptions& options = {});

// Header: resolution,local,mem_bottleneck,mem_inner,fusion,other,total,attention_ref,wall_ms
// Generator MACs (mem_chunk) are reported inside `other`.
void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows);

// Human-readable report with per-stage breakdown.
void write_flops_report(std::ostream& out, const ModelConfig& config, const FlopsReport& report);

// Published reference totals in G for M1-M4; 0 for other names.
double table_reference_gflops(const std::string& preset);

}  // namespace convneur
