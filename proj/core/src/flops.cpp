#include "convneur/flops.hpp"

#include "convneur/error.hpp"
#include "convneur/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace convneur {

namespace {

constexpr std::size_t idx(CostCategory c) { return static_cast<std::size_t>(c); }

std::uint64_t sum(const FlopsReport::Counts& c) {
    std::uint64_t s = 0;
    for (std::uint64_t v : c) {
        s += v;
    }
    return s;
}

void check_resolution(std::size_t height, std::size_t width) {
    if (height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0) {
        throw ConfigError("resolution " + std::to_string(height) + "x" + std::to_string(width) +
                          " is not divisible by 32");
    }
}

void add_memory(FlopsReport::Counts& counts, std::uint64_t c, std::uint64_t hw, const ModelConfig& config) {
    const std::uint64_t cm = config.c_mem, d = config.c_mem / config.heads, len = config.chunk_len;
    const std::uint64_t chunks = (hw + len - 1) / len;
    counts[idx(CostCategory::mem_bottleneck)] += 2 * c * cm * hw;
    counts[idx(CostCategory::mem_inner)] += hw * (3 * cm * cm + 3 * cm * d);
    counts[idx(CostCategory::mem_chunk)] += chunks * 3 * (cm + 1);
}

}  // namespace

std::uint64_t FlopsReport::category(CostCategory c) const {
    std::uint64_t s = head[idx(c)];
    for (const Counts& stage : stages) {
        s += stage[idx(c)];
    }
    return s;
}

std::uint64_t FlopsReport::memory_linear() const {
    return category(CostCategory::mem_bottleneck) + category(CostCategory::mem_inner);
}

std::uint64_t FlopsReport::memory_total() const { return memory_linear() + category(CostCategory::mem_chunk); }

std::uint64_t FlopsReport::total() const {
    std::uint64_t s = sum(head);
    for (const Counts& stage : stages) {
        s += sum(stage);
    }
    return s;
}

FlopsReport count_flops(const ModelConfig& config, std::size_t height, std::size_t width) {
    check_resolution(height, width);
    ModelConfig checked = config;
    checked.image_height = height;
    checked.image_width = width;
    checked.validate();

    FlopsReport r;
    r.height = height;
    r.width = width;
    std::uint64_t h = height / 4, w = width / 4, in = 3, patch = 4;
    const std::uint64_t k = config.kernel, ratio = config.expansion;
    for (std::size_t s = 0; s < kStageCount; ++s) {
        if (s > 0) {
            h /= 2;
            w /= 2;
            patch = 2;
        }
        const std::uint64_t c = config.dims[s], hw = h * w;
        FlopsReport::Counts counts{};
        counts[idx(CostCategory::other)] += in * patch * patch * c * hw;
        if (config.placement == Placement::per_stage) {
            add_memory(counts, c, hw, config);
        }
        for (std::size_t b = 0; b < config.depths[s]; ++b) {
            counts[idx(CostCategory::local)] += c * k * k * hw + 2 * ratio * c * c * hw;
            if (config.placement == Placement::per_layer) {
                add_memory(counts, c, hw, config);
            }
            const bool has_g = config.placement == Placement::per_layer ||
                               (config.placement == Placement::per_stage &&
                                (b == 0 || config.gate_scope == GateScope::stage));
            if (has_g && config.fusion.mode == FusionMode::concatenation) {
                counts[idx(CostCategory::fusion)] += 2 * c * c * hw;
            }
        }
        r.stages.push_back(counts);
        in = c;
    }
    r.head[idx(CostCategory::other)] = in * config.num_classes;
    return r;
}

FlopsReport instrumented_count(Model& model, const Tensor& image) {
    if (image.rank() != 3) {
        throw ConfigError("instrumented_count expects a [3, H, W] image");
    }
    check_resolution(image.dim(1), image.dim(2));
    CountingSession session;
    Tape tape(false);
    model.forward(tape, image, false);
    const OpCounts& counts = session.counts();

    // Counts are per category only, so they land in a single pseudo-stage.
    FlopsReport r;
    r.height = image.dim(1);
    r.width = image.dim(2);
    FlopsReport::Counts all{};
    for (std::size_t i = 0; i < kCostCategoryCount; ++i) {
        all[i] = counts.macs[i];
    }
    r.stages.push_back(all);
    return r;
}

FlopsComparison compare_flops(const FlopsReport& analytic, const FlopsReport& measured, double tolerance) {
    FlopsComparison cmp;
    std::ostringstream diag;
    for (std::size_t i = 0; i < kCostCategoryCount; ++i) {
        const auto c = static_cast<CostCategory>(i);
        const double a = static_cast<double>(analytic.category(c));
        const double m = static_cast<double>(measured.category(c));
        const double rel = std::abs(a - m) / std::max(1.0, a);
        if (rel > cmp.worst_relative) {
            cmp.worst_relative = rel;
            cmp.worst_category = c;
        }
    }
    const double ta = static_cast<double>(analytic.total()), tm = static_cast<double>(measured.total());
    const double total_rel = std::abs(ta - tm) / std::max(1.0, ta);
    cmp.within_tolerance = cmp.worst_relative <= tolerance && total_rel <= tolerance;
    if (!cmp.within_tolerance) {
        diag << "analytic and instrumented counts diverge: largest in '" << category_name(cmp.worst_category)
             << "' (analytic " << analytic.category(cmp.worst_category) << ", instrumented "
             << measured.category(cmp.worst_category) << ", relative " << cmp.worst_relative << ")";
        cmp.diagnostic = diag.str();
    }
    return cmp;
}

double attention_reference(const ModelConfig& config, std::size_t height, std::size_t width) {
    const double tokens = static_cast<double>(height * width) / 256.0;
    return tokens * tokens * static_cast<double>(*std::max_element(config.dims.begin(), config.dims.end()));
}

std::vector<SweepRow> scaling_sweep(const ModelConfig& config, const std::vector<std::size_t>& resolutions,
                                    const SweepOptions& options) {
    for (std::size_t res : resolutions) {
        check_resolution(res, res);
    }
    std::vector<SweepRow> rows;
    for (std::size_t res : resolutions) {
        SweepRow row;
        row.resolution = res;
        row.report = count_flops(config, res, res);
        row.attention_ref = attention_reference(config, res, res);
        if (options.time_forward) {
            ModelConfig sized = config;
            sized.image_height = sized.image_width = res;
            Model model = Model::build(sized, options.seed);
            Rng rng(mix_seed(options.seed, res));
            Tensor image({3, res, res});
            for (double& v : image.data()) {
                v = rng.uniform();
            }
            for (std::size_t i = 0; i < options.warmup; ++i) {
                model.predict_one(image);
            }
            std::vector<double> times;
            for (std::size_t i = 0; i < std::max<std::size_t>(1, options.repeats); ++i) {
                const auto start = std::chrono::steady_clock::now();
                model.predict_one(image);
                const auto stop = std::chrono::steady_clock::now();
                times.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
            }
            std::sort(times.begin(), times.end());
            row.wall_ms = times[times.size() / 2];
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
    out << "resolution,local,mem_bottleneck,mem_inner,fusion,other,total,attention_ref,wall_ms\n";
    for (const SweepRow& row : rows) {
        const FlopsReport& r = row.report;
        out << row.resolution << ',' << r.category(CostCategory::local) << ','
            << r.category(CostCategory::mem_bottleneck) << ',' << r.category(CostCategory::mem_inner) << ','
            << r.category(CostCategory::fusion) << ','
            << r.category(CostCategory::other) + r.category(CostCategory::mem_chunk) << ',' << r.total() << ','
            << std::setprecision(17) << row.attention_ref << ',' << std::setprecision(6) << std::fixed
            << row.wall_ms << std::defaultfloat << '\n';
    }
}

void write_flops_report(std::ostream& out, const ModelConfig& config, const FlopsReport& report) {
    out << "model " << config.name << " at " << report.height << "x" << report.width << " (placement "
        << placement_name(config.placement) << ", fusion " << fusion_mode_name(config.fusion.mode) << ")\n";
    out << "memory cost uses the linear fast-weight expansion: inner = HW*(3*C_m^2 + 3*C_m*d), "
           "generators = T*3*(C_m+1)\n";
    out << std::left << std::setw(8) << "stage";
    for (std::size_t i = 0; i < kCostCategoryCount; ++i) {
        out << std::right << std::setw(16) << category_name(static_cast<CostCategory>(i));
    }
    out << '\n';
    auto row = [&](const std::string& label, const FlopsReport::Counts& c) {
        out << std::left << std::setw(8) << label;
        for (std::uint64_t v : c) {
            out << std::right << std::setw(16) << v;
        }
        out << '\n';
    };
    for (std::size_t s = 0; s < report.stages.size(); ++s) {
        row(std::to_string(s), report.stages[s]);
    }
    row("head", report.head);
    out << std::fixed << std::setprecision(3) << "total " << report.giga() << " G MACs\n" << std::defaultfloat;
    const double ref = table_reference_gflops(config.name);
    if (ref > 0.0 && report.height == 224 && report.width == 224) {
        const double dev = (report.giga() - ref) / ref * 100.0;
        out << std::fixed << std::setprecision(2) << "table reference " << ref << " G, deviation " << std::showpos
            << dev << std::noshowpos << "%\n"
            << std::defaultfloat;
    }
}

double table_reference_gflops(const std::string& preset) {
    if (preset == "M1") return 0.71;
    if (preset == "M2") return 1.01;
    if (preset == "M3") return 1.77;
    if (preset == "M4") return 3.06;
    return 0.0;
}

}  // namespace convneur
