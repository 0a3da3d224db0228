#include "helpers.hpp"

#include "convneur/error.hpp"
#include "convneur/flops.hpp"
#include "convneur/model.hpp"

#include <doctest.h>

#include <cmath>
#include <sstream>

using namespace convneur;
using convneur::test::random_tensor;

namespace {

std::uint64_t stage_memory(const FlopsReport& r, std::size_t s) {
    return r.stages[s][static_cast<std::size_t>(CostCategory::mem_bottleneck)] +
           r.stages[s][static_cast<std::size_t>(CostCategory::mem_inner)] +
           r.stages[s][static_cast<std::size_t>(CostCategory::mem_chunk)];
}

// Least-squares fit y = a + b x; returns the largest residual relative to y.
double affine_fit_residual(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    const double b = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    const double a = (sy - b * sx) / n;
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        worst = std::max(worst, std::abs(a + b * x[i] - y[i]) / y[i]);
    }
    return worst;
}

}  // namespace

TEST_SUITE("count_flops") {
    TEST_CASE("total is the sum of its parts") {
        const FlopsReport r = count_flops(ModelConfig::preset("M2"), 224, 224);
        std::uint64_t parts = 0;
        for (std::size_t i = 0; i < kCostCategoryCount; ++i) {
            parts += r.category(static_cast<CostCategory>(i));
        }
        CHECK(parts == r.total());
    }

    TEST_CASE("bottleneck term is 2 C C_m HW per insertion") {
        const ModelConfig c = ModelConfig::preset("M1");
        const FlopsReport r = count_flops(c, 224, 224);
        for (std::size_t s = 0; s < 4; ++s) {
            const std::uint64_t side = 224 / (std::uint64_t{4} << s);
            CHECK(r.stages[s][static_cast<std::size_t>(CostCategory::mem_bottleneck)] ==
                  2 * c.dims[s] * c.c_mem * side * side);
        }
    }

    TEST_CASE("reference totals within 20%, ordering exact") {
        double previous = 0.0;
        for (const std::string name : {"M1", "M2", "M3", "M4"}) {
            const double g = count_flops(ModelConfig::preset(name), 224, 224).giga();
            const double ref = table_reference_gflops(name);
            CHECK_MESSAGE(std::abs(g - ref) / ref <= 0.20, name << " " << g << " vs " << ref);
            CHECK(g > previous);
            previous = g;
        }
        CHECK(table_reference_gflops("M1") == 0.71);
        CHECK(table_reference_gflops("M2") == 1.01);
        CHECK(table_reference_gflops("M3") == 1.77);
        CHECK(table_reference_gflops("M4") == 3.06);
    }

    TEST_CASE("doubling H and W quadruples both linear memory terms") {
        const ModelConfig c = ModelConfig::preset("M3");
        const FlopsReport a = count_flops(c, 224, 224), b = count_flops(c, 448, 448);
        CHECK(b.category(CostCategory::mem_inner) == 4 * a.category(CostCategory::mem_inner));
        CHECK(b.category(CostCategory::mem_bottleneck) == 4 * a.category(CostCategory::mem_bottleneck));
    }

    TEST_CASE("single chunk vs four chunks: identical inner cost") {
        ModelConfig c = ModelConfig::preset("micro");
        c.image_height = c.image_width = 64;  // stage 0 is 16x16 = 256 tokens
        c.chunk_len = 256;
        const FlopsReport one = count_flops(c, 64, 64);
        c.chunk_len = 64;
        const FlopsReport four = count_flops(c, 64, 64);
        CHECK(one.stages[0][static_cast<std::size_t>(CostCategory::mem_inner)] ==
              four.stages[0][static_cast<std::size_t>(CostCategory::mem_inner)]);
    }

    TEST_CASE("resolution not divisible by 32") {
        CHECK_THROWS_AS(count_flops(ModelConfig::preset("M1"), 225, 225), ConfigError);
    }

    TEST_CASE("per_layer memory scales by each stage's depth") {
        ModelConfig c = ModelConfig::preset("M3");
        const FlopsReport ps = count_flops(c, 224, 224);
        c.placement = Placement::per_layer;
        const FlopsReport pl = count_flops(c, 224, 224);
        for (std::size_t s = 0; s < 4; ++s) {
            CHECK(stage_memory(pl, s) == c.depths[s] * stage_memory(ps, s));
        }
        CHECK(c.memory_module_count() == 3 * ModelConfig::preset("M3").memory_module_count());
    }

    TEST_CASE("affine in HW with relative residual below 1e-6") {
        const ModelConfig c = ModelConfig::preset("M1");
        std::vector<double> hw, mem;
        for (std::size_t res : {224, 320, 448, 640}) {
            const FlopsReport r = count_flops(c, res, res);
            hw.push_back(static_cast<double>(res * res));
            mem.push_back(static_cast<double>(r.memory_linear()));
        }
        CHECK(affine_fit_residual(hw, mem) < 1e-6);
    }
}

TEST_SUITE("instrumented_count") {
    TEST_CASE("micro model agrees with the closed form within 1%") {
        for (Placement p : {Placement::none, Placement::per_stage, Placement::per_layer}) {
            for (FusionMode f : {FusionMode::gating, FusionMode::concatenation}) {
                ModelConfig c = ModelConfig::preset("micro");
                c.placement = p;
                c.fusion.mode = f;
                Model m = Model::build(c, 1);
                const FlopsReport measured = instrumented_count(m, random_tensor({3, 64, 64}, 2, 0, 1));
                const FlopsComparison cmp = compare_flops(count_flops(c, 64, 64), measured);
                CHECK_MESSAGE(cmp.within_tolerance, cmp.diagnostic);
                CHECK(measured.total() == count_flops(c, 64, 64).total());
            }
        }
    }

    TEST_CASE("local-only model has zero memory counts") {
        ModelConfig c = ModelConfig::preset("micro");
        c.placement = Placement::none;
        Model m = Model::build(c, 3);
        const FlopsReport r = instrumented_count(m, random_tensor({3, 32, 32}, 4, 0, 1));
        CHECK(r.memory_total() == 0);
    }

    TEST_CASE("a mismatch names the divergent category") {
        const ModelConfig c = ModelConfig::preset("micro");
        FlopsReport a = count_flops(c, 32, 32);
        FlopsReport b = a;
        b.stages[1][static_cast<std::size_t>(CostCategory::local)] *= 2;
        const FlopsComparison cmp = compare_flops(a, b);
        CHECK_FALSE(cmp.within_tolerance);
        CHECK(cmp.worst_category == CostCategory::local);
        CHECK(cmp.diagnostic.find("local") != std::string::npos);
    }
}

TEST_SUITE("scaling_sweep") {
    TEST_CASE("224 -> 448: memory x4, attention reference x16") {
        SweepOptions opt;
        opt.time_forward = false;
        const auto rows = scaling_sweep(ModelConfig::preset("M2"), {224, 448}, opt);
        REQUIRE(rows.size() == 2);
        CHECK(static_cast<double>(rows[1].report.memory_linear()) / static_cast<double>(rows[0].report.memory_linear()) ==
              4.0);
        CHECK(rows[1].attention_ref / rows[0].attention_ref == 16.0);
        CHECK(rows[0].wall_ms == 0.0);
    }

    TEST_CASE("dense attention reference is (HW/256)^2 C") {
        const ModelConfig c = ModelConfig::preset("M1");
        CHECK(attention_reference(c, 224, 224) == (224.0 * 224 / 256) * (224.0 * 224 / 256) * 320);
    }

    TEST_CASE("single resolution gives one row; totals are monotone") {
        SweepOptions opt;
        opt.time_forward = false;
        CHECK(scaling_sweep(ModelConfig::preset("M1"), {224}, opt).size() == 1);
        const auto rows = scaling_sweep(ModelConfig::preset("M1"), {224, 320, 448, 640}, opt);
        for (std::size_t i = 1; i < rows.size(); ++i) {
            CHECK(rows[i].report.total() >= rows[i - 1].report.total());
        }
    }

    TEST_CASE("CSV header and layout") {
        SweepOptions opt;
        opt.time_forward = false;
        std::ostringstream out;
        write_sweep_csv(out, scaling_sweep(ModelConfig::preset("M2"), {224, 448, 896}, opt));
        std::istringstream in(out.str());
        std::string line;
        std::getline(in, line);
        CHECK(line == "resolution,local,mem_bottleneck,mem_inner,fusion,other,total,attention_ref,wall_ms");
        std::size_t rows = 0;
        while (std::getline(in, line)) {
            ++rows;
            CHECK(std::count(line.begin(), line.end(), ',') == 8);
        }
        CHECK(rows == 3);
    }

    TEST_CASE("timed sweep on a small config reports positive wall time") {
        SweepOptions opt;
        opt.repeats = 1;
        opt.warmup = 0;
        const auto rows = scaling_sweep(ModelConfig::preset("micro"), {32}, opt);
        CHECK(rows[0].wall_ms > 0.0);
    }
}
