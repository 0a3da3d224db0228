#include "convneur/verify.hpp"

#include "convneur/checkpoint.hpp"
#include "convneur/error.hpp"
#include "convneur/flops.hpp"
#include "convneur/fusion.hpp"
#include "convneur/grad_check.hpp"
#include "convneur/local_branch.hpp"
#include "convneur/memory.hpp"
#include "convneur/model.hpp"
#include "convneur/ops.hpp"
#include "convneur/reference.hpp"
#include "convneur/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <optional>
#include <sstream>
#include <unistd.h>

namespace convneur {

namespace {

constexpr double kGradTolerance = 1e-4;
constexpr double kGradEps = 1e-5;
constexpr double kExactTolerance = 1e-9;

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) {
        v = rng.uniform(lo, hi);
    }
    return t;
}

void randomize_generators(MemoryParams& p, Rng& rng, double scale) {
    for (Tensor* t : {&p.gen_step_w, &p.gen_step_b, &p.gen_momentum_w, &p.gen_momentum_b, &p.gen_decay_w,
                      &p.gen_decay_b}) {
        for (double& v : t->data()) {
            v = rng.uniform(-scale, scale);
        }
    }
}

// Memory parameters with O(1) projections so every path carries signal.
MemoryParams test_memory_params(std::size_t channels, const MemoryConfig& config, Rng& rng) {
    MemoryParams p = MemoryParams::init(channels, config, rng, 0.5, 0.5);
    randomize_generators(p, rng, 0.3);
    return p;
}

Tensor run_memory(const Tensor& x, MemoryParams& params, const MemoryConfig& config, MemoryTrace* trace = nullptr) {
    Tape tape(false);
    BoundMemoryParams bound = bind(tape, params);
    return memory_branch(tape.constant_ref(x), bound, config, trace).value();
}

struct Failure {
    std::string message;
};

std::string format_double(double v) {
    std::ostringstream os;
    os.precision(3);
    os << std::scientific << v;
    return os.str();
}

// ---- suites --------------------------------------------------------------

using OpLoss = std::function<Var(Tape&, std::vector<Var>&)>;

struct OpCase {
    std::string name;
    std::vector<Shape> shapes;
    OpLoss f;
};

std::vector<OpCase> op_cases() {
    auto reduce = [](Var y) {
        // A fixed, non-symmetric weighting so that sum-invariant errors show up.
        Tape& t = *y.tape;
        Tensor w(y.shape());
        for (std::size_t i = 0; i < w.numel(); ++i) {
            w[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
        }
        return sum(mul(y, t.constant(std::move(w))));
    };
    std::vector<OpCase> cases;
    cases.push_back({"depthwise_conv2d", {{3, 5, 5}, {3, 3, 3}, {3}},
                     [=](Tape&, std::vector<Var>& p) { return reduce(depthwise_conv2d(p[0], p[1], 1, 1, p[2])); }});
    cases.push_back({"depthwise_conv2d/stride2", {{2, 7, 7}, {2, 3, 3}},
                     [=](Tape&, std::vector<Var>& p) { return reduce(depthwise_conv2d(p[0], p[1], 2, 0)); }});
    cases.push_back({"pointwise_conv", {{3, 2, 3}, {4, 3}, {4}},
                     [=](Tape&, std::vector<Var>& p) { return reduce(pointwise_conv(p[0], p[1], p[2])); }});
    cases.push_back({"layer_norm", {{4, 5}, {5}, {5}},
                     [=](Tape&, std::vector<Var>& p) { return reduce(layer_norm(p[0], p[1], p[2], 1e-6)); }});
    cases.push_back({"channel_norm", {{4, 2, 3}, {4}, {4}},
                     [=](Tape&, std::vector<Var>& p) { return reduce(channel_norm(p[0], p[1], p[2], 1e-6)); }});
    cases.push_back({"sigmoid", {{7}}, [=](Tape&, std::vector<Var>& p) { return reduce(sigmoid(p[0])); }});
    cases.push_back({"gelu", {{7}}, [=](Tape&, std::vector<Var>& p) { return reduce(gelu(p[0])); }});
    cases.push_back({"softplus", {{7}}, [=](Tape&, std::vector<Var>& p) { return reduce(softplus(p[0])); }});
    cases.push_back({"mul", {{2, 3}, {2, 3}}, [=](Tape&, std::vector<Var>& p) { return reduce(mul(p[0], p[1])); }});
    cases.push_back({"mul/scalar", {{1}, {2, 3}}, [=](Tape&, std::vector<Var>& p) { return reduce(mul(p[0], p[1])); }});
    for (int ta = 0; ta < 2; ++ta) {
        for (int tb = 0; tb < 2; ++tb) {
            const Shape a = ta ? Shape{4, 3} : Shape{3, 4};
            const Shape b = tb ? Shape{2, 4} : Shape{4, 2};
            cases.push_back({"matmul/" + std::to_string(ta) + std::to_string(tb), {a, b},
                             [=](Tape&, std::vector<Var>& p) { return reduce(matmul(p[0], p[1], ta, tb)); }});
        }
    }
    cases.push_back({"matmul/batched", {{2, 3, 4}, {2, 4, 2}},
                     [=](Tape&, std::vector<Var>& p) { return reduce(matmul(p[0], p[1])); }});
    cases.push_back({"frobenius_cap", {{2, 2, 2}},
                     [=](Tape&, std::vector<Var>& p) { return reduce(frobenius_cap(p[0], 0.5)); }});
    cases.push_back({"space_to_depth", {{2, 4, 4}},
                     [=](Tape&, std::vector<Var>& p) { return reduce(space_to_depth(p[0], 2)); }});
    cases.push_back({"global_avg_pool", {{3, 2, 2}},
                     [=](Tape&, std::vector<Var>& p) { return reduce(global_avg_pool(p[0])); }});
    cases.push_back({"linear", {{2, 3}, {4, 3}, {4}},
                     [=](Tape&, std::vector<Var>& p) { return reduce(linear(p[0], p[1], p[2])); }});
    cases.push_back({"cross_entropy", {{5}},
                     [=](Tape&, std::vector<Var>& p) { return cross_entropy(p[0], 2, 0.1); }});
    return cases;
}

void suite_gradcheck_ops(const VerifyOptions& opt, std::ostringstream& detail) {
    double worst = 0.0;
    std::string worst_name;
    for (const OpCase& c : op_cases()) {
        for (std::size_t seed = 0; seed < opt.seeds; ++seed) {
            Rng rng(mix_seed(0x0b5, seed));
            std::vector<Tensor> tensors;
            for (const Shape& s : c.shapes) {
                tensors.push_back(random_tensor(s, rng));
            }
            std::vector<NamedTensor> named;
            for (std::size_t i = 0; i < tensors.size(); ++i) {
                named.push_back({c.name + ".arg" + std::to_string(i), &tensors[i]});
            }
            const auto result = grad_check(
                [&](Tape& tape) {
                    std::vector<Var> vars;
                    for (Tensor& t : tensors) {
                        vars.push_back(tape.parameter(t));
                    }
                    return c.f(tape, vars);
                },
                named, kGradEps);
            if (result.max_rel_error > worst) {
                worst = result.max_rel_error;
                worst_name = result.worst_param + "[" + std::to_string(result.worst_index) + "]";
            }
        }
    }
    detail << "max rel. error " << format_double(worst) << " (" << worst_name << ")";
    if (!(worst < kGradTolerance)) {
        throw Failure{"op gradient check failed: " + detail.str()};
    }
}

struct MicroBlock {
    LocalBranchParams local;
    MemoryParams memory;
    FusionParams fusion;
    MemoryConfig config;
    Tensor x;
    Tensor weights;
};

MicroBlock micro_block(std::uint64_t seed) {
    Rng rng(seed);
    MicroBlock b;
    b.config.c_mem = 4;
    b.config.heads = 2;
    b.config.chunk_len = 9;
    const std::size_t c = 8;
    b.local = LocalBranchParams::init(c, LocalBranchConfig{}, rng, 0.3);
    for (double& v : b.local.norm_gamma.data()) {
        v = rng.uniform(0.5, 1.5);
    }
    for (double& v : b.local.norm_beta.data()) {
        v = rng.uniform(-0.2, 0.2);
    }
    b.memory = test_memory_params(c, b.config, rng);
    b.fusion = FusionParams::init(c, FusionMode::gating, rng);
    for (double& v : b.fusion.gate_bias.data()) {
        v = rng.uniform(-0.5, 0.5);
    }
    b.x = random_tensor({c, 6, 6}, rng);
    b.weights = random_tensor({c, 6, 6}, rng);
    return b;
}

Var micro_block_loss(Tape& tape, MicroBlock& b) {
    Var x = tape.constant_ref(b.x);
    BoundMemoryParams mem = bind(tape, b.memory);
    Var g = memory_branch(x, mem, b.config);
    Var f_loc = local_forward(x, bind(tape, b.local));
    Var out = fuse(x, f_loc, g, bind(tape, b.fusion), FusionConfig{}, false, 0, 0.0);
    return sum(mul(out, tape.constant_ref(b.weights)));
}

void suite_gradcheck_block(const VerifyOptions& opt, std::ostringstream& detail) {
    double worst = 0.0;
    std::string worst_name;
    const std::size_t seeds = std::max<std::size_t>(1, std::min<std::size_t>(opt.seeds, 3));
    for (std::size_t seed = 0; seed < seeds; ++seed) {
        MicroBlock b = micro_block(mix_seed(0xb10c, seed));
        std::vector<NamedTensor> params = b.local.named("local.");
        for (auto& p : b.memory.named("memory.")) {
            params.push_back(p);
        }
        for (auto& p : b.fusion.named("fusion.")) {
            params.push_back(p);
        }
        const auto result = grad_check([&](Tape& tape) { return micro_block_loss(tape, b); }, params, kGradEps);
        if (result.max_rel_error >= worst) {
            worst = result.max_rel_error;
            worst_name = result.worst_param + "[" + std::to_string(result.worst_index) + "]";
        }
    }
    detail << "C=8 C_m=4 H_n=2 6x6 L=9 (T=4), " << seeds << " seeds, max rel. error " << format_double(worst)
           << " at " << worst_name;
    if (!(worst < kGradTolerance)) {
        throw Failure{"block gradient check failed: " + detail.str()};
    }
}

void suite_memory_oracle(const VerifyOptions& opt, std::ostringstream& detail) {
    struct Geometry {
        std::size_t h, w, len;
    };
    double worst = 0.0;
    std::size_t runs = 0;
    for (Geometry geo : {Geometry{4, 4, 8}, Geometry{6, 6, 9}, Geometry{5, 5, 8}}) {
        for (std::size_t seed = 0; seed < opt.seeds; ++seed) {
            Rng rng(mix_seed(0x0c1e, seed, geo.h));
            MemoryConfig config;
            config.c_mem = 4;
            config.heads = 2;
            config.chunk_len = geo.len;
            MemoryParams params = test_memory_params(8, config, rng);
            const Tensor x = random_tensor({8, geo.h, geo.w}, rng);
            const Tensor got = run_memory(x, params, config);
            const Tensor want = reference::memory_rollout(x, params, config);
            worst = std::max(worst, max_abs_diff(got, want));
            ++runs;
        }
    }
    detail << runs << " rollouts, max abs diff " << format_double(worst);
    if (!(worst < kExactTolerance)) {
        throw Failure{"memory rollout disagrees with the explicit-loop oracle: " + detail.str()};
    }
}

void suite_chunk_invariance(const VerifyOptions& opt, std::ostringstream& detail) {
    double worst = 0.0;
    for (std::size_t seed = 0; seed < opt.seeds; ++seed) {
        Rng rng(mix_seed(0xc4a, seed));
        MemoryConfig config;
        config.c_mem = 4;
        config.heads = 2;
        config.force.step = 0.0;
        config.force.decay = 0.0;
        MemoryParams params = test_memory_params(8, config, rng);
        const Tensor x = random_tensor({8, 6, 6}, rng);
        std::optional<Tensor> first;
        for (std::size_t len : {9u, 18u, 36u}) {
            config.chunk_len = len;
            const Tensor g = run_memory(x, params, config);
            if (first) {
                worst = std::max(worst, max_abs_diff(*first, g));
            } else {
                first = g;
            }
        }
    }
    detail << "L in {9, 18, 36}, max abs diff " << format_double(worst);
    if (!(worst < kExactTolerance)) {
        throw Failure{"frozen memory output depends on chunk size: " + detail.str()};
    }
}

void suite_permutation(const VerifyOptions& opt, std::ostringstream& detail) {
    double worst = 0.0;
    const std::size_t len = 9, tokens = 36;
    for (std::size_t seed = 0; seed < opt.seeds; ++seed) {
        Rng rng(mix_seed(0x9e7, seed));
        MemoryConfig config;
        config.c_mem = 4;
        config.heads = 2;
        config.chunk_len = len;
        MemoryParams params = test_memory_params(8, config, rng);
        const Tensor x = random_tensor({8, 6, 6}, rng);
        const std::size_t chunk = rng.below(tokens / len);
        std::vector<std::size_t> perm(len);
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = len; i > 1; --i) {
            std::swap(perm[i - 1], perm[rng.below(i)]);
        }
        // Apply the permutation to x and, separately, to the reference output.
        Tensor xp = x;
        const Tensor g = run_memory(x, params, config);
        Tensor expected = g;
        const std::size_t c = x.dim(0);
        for (std::size_t r = 0; r < len; ++r) {
            const std::size_t dst = chunk * len + r, src = chunk * len + perm[r];
            for (std::size_t ch = 0; ch < c; ++ch) {
                xp[ch * tokens + dst] = x[ch * tokens + src];
                expected[ch * tokens + dst] = g[ch * tokens + src];
            }
        }
        worst = std::max(worst, max_abs_diff(run_memory(xp, params, config), expected));
    }
    detail << "max abs diff " << format_double(worst);
    if (!(worst < kExactTolerance)) {
        throw Failure{"within-chunk permutation is not equivariant: " + detail.str()};
    }
}

void suite_causality(const VerifyOptions& opt, std::ostringstream& detail) {
    // Chunk t's own queries change with its tokens; what must not change is
    // every earlier retrieval and the state chunks 1..t read from.
    double worst = 0.0, later_change = 0.0;
    const std::size_t len = 9, tokens = 36, chunks = tokens / len;
    for (std::size_t seed = 0; seed < opt.seeds; ++seed) {
        Rng rng(mix_seed(0xca5, seed));
        MemoryConfig config;
        config.c_mem = 4;
        config.heads = 2;
        config.chunk_len = len;
        MemoryParams params = test_memory_params(8, config, rng);
        const Tensor x = random_tensor({8, 6, 6}, rng);
        const std::size_t t = rng.below(chunks - 1);
        Tensor xp = x;
        for (std::size_t ch = 0; ch < 8; ++ch) {
            for (std::size_t r = 0; r < len; ++r) {
                xp[ch * tokens + t * len + r] += rng.uniform(-1.0, 1.0);
            }
        }
        MemoryTrace trace, trace_p;
        const Tensor g = run_memory(x, params, config, &trace), gp = run_memory(xp, params, config, &trace_p);
        for (std::size_t ch = 0; ch < 8; ++ch) {
            for (std::size_t p = 0; p < tokens; ++p) {
                const double d = std::abs(g[ch * tokens + p] - gp[ch * tokens + p]);
                if (p / len < t) {
                    worst = std::max(worst, d);
                } else if (p / len > t) {
                    later_change = std::max(later_change, d);
                }
            }
        }
        for (std::size_t c = 0; c <= t; ++c) {
            worst = std::max(worst, max_abs_diff(trace.chunks[c].fast_in, trace_p.chunks[c].fast_in));
        }
    }
    detail << "max change in chunks 1..t " << format_double(worst) << ", later chunks respond up to "
           << format_double(later_change);
    if (!(worst < kExactTolerance)) {
        throw Failure{"perturbing chunk t changed earlier retrievals: " + detail.str()};
    }
    if (!(later_change > kExactTolerance)) {
        throw Failure{"later chunks never respond to earlier tokens: " + detail.str()};
    }
}

void suite_closed_gate(const VerifyOptions& opt, std::ostringstream& detail) {
    double worst = 0.0;
    for (std::size_t seed = 0; seed < opt.seeds; ++seed) {
        Rng rng(mix_seed(0x6a7e, seed));
        Tape tape(false);
        const Tensor x = random_tensor({8, 6, 6}, rng), f = random_tensor({8, 6, 6}, rng, -10.0, 10.0);
        Tensor bias({8});
        Var out = fuse(tape.constant_ref(x), tape.constant_ref(f), tape.constant(Tensor({8, 6, 6}, -50.0)),
                       BoundFusionParams{tape.constant_ref(bias), {}}, FusionConfig{}, false, 0, 0.0);
        worst = std::max(worst, max_abs_diff(out.value(), x));
    }
    detail << "gate pre-activation -50, max |F_out - X| " << format_double(worst);
    if (!(worst < 1e-12)) {
        throw Failure{"closed gate leaks local features: " + detail.str()};
    }
}

void suite_frozen_memory(const VerifyOptions& opt, std::ostringstream& detail) {
    double worst = 0.0;
    for (std::size_t seed = 0; seed < opt.seeds; ++seed) {
        Rng rng(mix_seed(0xf20, seed));
        MemoryConfig config;
        config.c_mem = 4;
        config.heads = 2;
        config.chunk_len = 5;
        config.force.step = 0.0;
        MemoryParams params = test_memory_params(8, config, rng);
        worst = std::max(worst, max_abs(run_memory(random_tensor({8, 6, 6}, rng), params, config)));
    }
    detail << "step forced to 0, max |G| " << format_double(worst);
    if (worst != 0.0) {
        throw Failure{"frozen memory produced a nonzero global map: " + detail.str()};
    }
}

void suite_flops(const VerifyOptions&, std::ostringstream& detail) {
    ModelConfig config = ModelConfig::preset("micro");
    config.depths = {1, 2, 1, 1};  // per_layer differs from per_stage
    Rng rng(5);
    const Tensor image = random_tensor({3, 32, 32}, rng, 0.0, 1.0);
    for (Placement placement : {Placement::per_stage, Placement::per_layer, Placement::none}) {
        config.placement = placement;
        Model model = Model::build(config, 1);
        const FlopsReport analytic = count_flops(config, 32, 32);
        const FlopsReport measured = instrumented_count(model, image);
        const FlopsComparison cmp = compare_flops(analytic, measured, 0.01);
        detail << (placement == Placement::per_stage ? "" : "; ") << placement_name(placement) << ": "
               << analytic.total() << " analytic vs " << measured.total() << " instrumented";
        if (!cmp.within_tolerance) {
            throw Failure{std::string(placement_name(placement)) + ": " + cmp.diagnostic};
        }
        if (placement == Placement::none && measured.memory_total() != 0) {
            throw Failure{"local-only model executed memory operations"};
        }
    }
    CountingSession session;
    config.placement = Placement::none;
    Model local_only = Model::build(config, 1);
    local_only.predict_one(image);
    if (session.counts().memory_rollouts != 0) {
        throw Failure{"local-only forward evaluated a memory state"};
    }
}

void suite_checkpoint(const VerifyOptions&, std::ostringstream& detail) {
    Model model = Model::build(ModelConfig::preset("micro"), 11);
    Rng rng(3);
    const Tensor image = random_tensor({3, 32, 32}, rng, 0.0, 1.0);
    const Tensor before = model.predict_one(image);
    const auto path = std::filesystem::temp_directory_path() /
                      ("convneur-verify-" + std::to_string(::getpid()) + ".ckpt");
    save_checkpoint(model, path, 42, 7);
    Checkpoint loaded = load_checkpoint(path);
    std::filesystem::remove(path);
    const Tensor after = loaded.model.predict_one(image);
    const Tensor again = model.predict_one(image);
    detail << "micro model, " << model.parameter_count() << " parameters";
    if (!bit_equal(before, after) || loaded.step != 42 || loaded.rng_state != 7) {
        throw Failure{"checkpoint round-trip changed the forward output"};
    }
    if (!bit_equal(before, again)) {
        throw Failure{"eval forward is not deterministic"};
    }
}

struct Suite {
    const char* name;
    const char* description;
    void (*run)(const VerifyOptions&, std::ostringstream&);
};

constexpr Suite kSuites[] = {
    {"gradcheck-ops", "finite-difference check of every differentiable op", suite_gradcheck_ops},
    {"gradcheck-block", "finite-difference check of a full block through the memory rollout",
     suite_gradcheck_block},
    {"memory-oracle", "memory branch vs explicit-loop rollout", suite_memory_oracle},
    {"chunk-invariance", "frozen memory output independent of chunk size", suite_chunk_invariance},
    {"permutation", "within-chunk permutation equivariance", suite_permutation},
    {"causality", "chunk t never influences retrievals of chunks 1..t", suite_causality},
    {"closed-gate", "gate pre-activation -50 leaves the residual untouched", suite_closed_gate},
    {"frozen-memory", "zero step size gives a zero global map", suite_frozen_memory},
    {"flops", "analytic vs instrumented MAC counts on the micro model", suite_flops},
    {"checkpoint", "checkpoint round-trip and eval determinism", suite_checkpoint},
};

}  // namespace

std::vector<SuiteInfo> verify_suites() {
    std::vector<SuiteInfo> out;
    for (const Suite& s : kSuites) {
        out.push_back({s.name, s.description});
    }
    return out;
}

std::vector<SuiteResult> run_verification(const VerifyOptions& options) {
    for (const std::string& name : options.only) {
        const bool known = std::any_of(std::begin(kSuites), std::end(kSuites),
                                       [&](const Suite& s) { return name == s.name; });
        if (!known) {
            throw UsageError("unknown verification suite '" + name + "'");
        }
    }
    std::optional<FaultInjection> fault;
    if (!options.broken_backward.empty()) {
        fault.emplace(options.broken_backward);
    }
    std::vector<SuiteResult> results;
    for (const Suite& s : kSuites) {
        if (!options.only.empty() &&
            std::find(options.only.begin(), options.only.end(), s.name) == options.only.end()) {
            continue;
        }
        SuiteResult r;
        r.name = s.name;
        std::ostringstream detail;
        const auto start = std::chrono::steady_clock::now();
        try {
            s.run(options, detail);
            r.passed = true;
            r.detail = detail.str();
        } catch (const Failure& f) {
            r.detail = f.message;
        } catch (const std::exception& e) {
            r.detail = std::string("error: ") + e.what();
        }
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        results.push_back(std::move(r));
    }
    return results;
}

}  // namespace convneur
