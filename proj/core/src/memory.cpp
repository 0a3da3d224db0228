#include "convneur/memory.hpp"

#include "convneur/counters.hpp"
#include "convneur/error.hpp"
#include "convneur/ops.hpp"

#include <atomic>
#include <cmath>
#include <iostream>

namespace convneur {

void MemoryConfig::validate() const {
    if (c_mem == 0 || heads == 0) {
        throw ConfigError("memory: c_mem and heads must be positive");
    }
    if (c_mem % heads != 0) {
        throw ConfigError("memory: c_mem " + std::to_string(c_mem) + " is not divisible by " +
                          std::to_string(heads) + " heads");
    }
    if (chunk_len == 0) {
        throw ConfigError("memory: chunk_len must be at least 1");
    }
    if (!(base_step > 0.0)) {
        throw ConfigError("memory: base_step must be positive");
    }
    if (!(norm_cap > 0.0)) {
        throw ConfigError("memory: norm_cap must be positive");
    }
}

namespace {

Tensor trunc_normal(Shape shape, double std, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) {
        v = rng.truncated_normal(std);
    }
    return t;
}

}  // namespace

MemoryParams MemoryParams::init(std::size_t channels, const MemoryConfig& config, Rng& rng, double proj_std,
                                double qkv_std) {
    config.validate();
    const std::size_t cm = config.c_mem;
    MemoryParams p;
    p.proj_in = trunc_normal({cm, channels}, proj_std, rng);
    p.w_q = trunc_normal({cm, cm}, qkv_std, rng);
    p.w_k = trunc_normal({cm, cm}, qkv_std, rng);
    p.w_v = trunc_normal({cm, cm}, qkv_std, rng);
    p.gen_step_w = Tensor({1, cm + 1});
    p.gen_step_b = Tensor({1});
    p.gen_momentum_w = Tensor({1, cm + 1});
    p.gen_momentum_b = Tensor({1});
    p.gen_decay_w = Tensor({1, cm + 1});
    p.gen_decay_b = Tensor({1});
    p.proj_out = trunc_normal({channels, cm}, proj_std, rng);
    return p;
}

std::vector<NamedTensor> MemoryParams::named(const std::string& prefix) {
    return {
        {prefix + "proj_in", &proj_in},
        {prefix + "w_q", &w_q},
        {prefix + "w_k", &w_k},
        {prefix + "w_v", &w_v},
        {prefix + "gen_step_w", &gen_step_w},
        {prefix + "gen_step_b", &gen_step_b},
        {prefix + "gen_momentum_w", &gen_momentum_w},
        {prefix + "gen_momentum_b", &gen_momentum_b},
        {prefix + "gen_decay_w", &gen_decay_w},
        {prefix + "gen_decay_b", &gen_decay_b},
        {prefix + "proj_out", &proj_out},
    };
}

BoundMemoryParams bind(Tape& tape, MemoryParams& p) {
    return BoundMemoryParams{
        tape.parameter(p.proj_in),        tape.parameter(p.w_q),
        tape.parameter(p.w_k),            tape.parameter(p.w_v),
        tape.parameter(p.gen_step_w),     tape.parameter(p.gen_step_b),
        tape.parameter(p.gen_momentum_w), tape.parameter(p.gen_momentum_b),
        tape.parameter(p.gen_decay_w),    tape.parameter(p.gen_decay_b),
        tape.parameter(p.proj_out),
    };
}

MemoryState initial_state(Tape& tape, const MemoryConfig& config) {
    const std::size_t d = config.head_dim();
    return MemoryState{tape.constant(Tensor({config.heads, d, d})), tape.constant(Tensor({config.heads, d, d}))};
}

ChunkLayout ChunkLayout::make(std::size_t height, std::size_t width, std::size_t chunk_len) {
    if (chunk_len == 0) {
        throw ConfigError("chunk length must be at least 1");
    }
    ChunkLayout l;
    l.height = height;
    l.width = width;
    l.token_count = height * width;
    l.chunk_len = chunk_len;
    l.num_chunks = (l.token_count + chunk_len - 1) / chunk_len;
    l.pad_count = l.num_chunks * chunk_len - l.token_count;
    return l;
}

std::size_t ChunkLayout::valid_in_chunk(std::size_t t) const {
    const std::size_t start = t * chunk_len;
    return start >= token_count ? 0 : std::min(chunk_len, token_count - start);
}

Var bottleneck(Var x, Var proj_in) {
    const Tensor& in = x.value();
    const Tensor& w = proj_in.value();
    static std::atomic<bool> warned{false};
    if (in.rank() == 3 && w.rank() == 2 && w.dim(0) >= in.dim(0) && !warned.exchange(true)) {
        std::cerr << "warning: memory bottleneck maps " << in.dim(0) << " channels to " << w.dim(0)
                  << " (not a reduction)\n";
    }
    return pointwise_conv(x, proj_in);
}

namespace {

// [C, H, W] -> [L, C] tokens [start, start + L) in raster order, zero past the end.
Var gather_tokens(Var x, std::size_t start, std::size_t len) {
    const Tensor& in = x.value();
    const std::size_t c = in.dim(0), tokens = in.dim(1) * in.dim(2);
    Tensor out({len, c});
    const std::size_t rows = start >= tokens ? 0 : std::min(len, tokens - start);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            out[r * c + ch] = in[ch * tokens + start + r];
        }
    }
    return x.tape->record(std::move(out), {x}, "gather_tokens", [x, start, rows, c, tokens](Tape& t, Var o) {
        if (!t.requires_grad(x)) {
            return;
        }
        auto gx = t.grad_accumulator(x);
        const auto go = t.grad(o);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                gx[ch * tokens + start + r] += go[r * c + ch];
            }
        }
    });
}

}  // namespace

Chunked chunk(Var x_mem, std::size_t chunk_len) {
    const Tensor& in = x_mem.value();
    if (in.rank() != 3) {
        throw ConfigError("chunk expects [C_m, H, W], got " + shape_to_string(in.shape()));
    }
    Chunked result;
    result.layout = ChunkLayout::make(in.dim(1), in.dim(2), chunk_len);
    for (std::size_t t = 0; t < result.layout.num_chunks; ++t) {
        result.chunks.push_back(gather_tokens(x_mem, t * chunk_len, chunk_len));
    }
    return result;
}

Qkv qkv(Var chunk_tokens, Var w_q, Var w_k, Var w_v, std::size_t heads) {
    const Tensor& s = chunk_tokens.value();
    if (s.rank() != 2 || w_q.value().rank() != 2 || s.dim(1) != w_q.value().dim(1)) {
        throw ConfigError("qkv: chunk " + shape_to_string(s.shape()) + " does not match projection " +
                          shape_to_string(w_q.value().shape()));
    }
    // Token rows are multiplied by W^T so that each token becomes W s.
    return Qkv{
        split_heads(matmul(chunk_tokens, w_q, false, true), heads),
        split_heads(matmul(chunk_tokens, w_k, false, true), heads),
        split_heads(matmul(chunk_tokens, w_v, false, true), heads),
    };
}

Var retrieve(const MemoryState& state, Var q) {
    const Shape& qs = q.shape();
    const Shape& ms = state.fast_weights.shape();
    if (qs.size() != 3 || qs[0] != ms[0] || qs[2] != ms[1]) {
        throw ConfigError("retrieve: query " + shape_to_string(qs) + " does not match memory " +
                          shape_to_string(ms));
    }
    return merge_heads(matmul(q, state.fast_weights));
}

Surprise surprise(const MemoryState& state, Var k, Var v, std::size_t valid_tokens) {
    if (k.shape() != v.shape() || k.shape().size() != 3) {
        throw ConfigError("surprise: key " + shape_to_string(k.shape()) + " and value " +
                          shape_to_string(v.shape()) + " disagree");
    }
    const std::size_t heads = k.shape()[0], rows = k.shape()[1], d = k.shape()[2];
    Var residual = sub(matmul(k, state.fast_weights), v);
    Var keys = k;
    if (valid_tokens < rows) {
        Tensor mask({heads, rows, d});
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t r = 0; r < valid_tokens; ++r) {
                for (std::size_t j = 0; j < d; ++j) {
                    mask[(h * rows + r) * d + j] = 1.0;
                }
            }
        }
        Var m = k.tape->constant(std::move(mask));
        residual = mul(residual, m);
        keys = mul(k, m);
    }
    Var loss = sum(square(residual));
    Var grad = scale(matmul(keys, residual, true, false), 2.0);
    return Surprise{loss, grad};
}

Coefficients gen_coeffs(Var chunk_tokens, Var loss, std::size_t valid_tokens, const BoundMemoryParams& params,
                        const MemoryConfig& config) {
    Tape& tape = *chunk_tokens.tape;
    Var pooled = mean_rows(chunk_tokens, valid_tokens);
    Var features = concat_rows({pooled, loss});
    auto head = [&](Var w, Var b) { return reshape(linear(features, w, b), {1}); };
    Coefficients c;
    c.theta = config.force.step ? tape.constant(Tensor::scalar(*config.force.step))
                                : scale(softplus(head(params.gen_step_w, params.gen_step_b)), config.base_step);
    c.eta = config.force.momentum ? tape.constant(Tensor::scalar(*config.force.momentum))
                                  : sigmoid(head(params.gen_momentum_w, params.gen_momentum_b));
    c.alpha = config.force.decay ? tape.constant(Tensor::scalar(*config.force.decay))
                                 : sigmoid(head(params.gen_decay_w, params.gen_decay_b));
    return c;
}

MemoryState update(const MemoryState& state, Var grad, const Coefficients& coeffs, double norm_cap,
                   std::size_t chunk_index) {
    Var momentum = sub(mul(coeffs.eta, state.momentum), mul(coeffs.theta, grad));
    Var keep = add_scalar(scale(coeffs.alpha, -1.0), 1.0);
    Var fast = frobenius_cap(add(mul(keep, state.fast_weights), momentum), norm_cap);
    if (!fast.value().all_finite() || !momentum.value().all_finite()) {
        throw NumericalError("memory update produced non-finite values at chunk " + std::to_string(chunk_index));
    }
    return MemoryState{fast, momentum};
}

Var reassemble(const std::vector<Var>& outputs, const ChunkLayout& layout) {
    if (outputs.size() != layout.num_chunks) {
        throw InternalError("reassemble: got " + std::to_string(outputs.size()) + " chunks, layout expects " +
                            std::to_string(layout.num_chunks));
    }
    if (outputs.empty()) {
        throw InternalError("reassemble: no chunks");
    }
    const std::size_t width = outputs.front().shape()[1];
    const std::size_t tokens = layout.token_count;
    for (std::size_t t = 0; t < outputs.size(); ++t) {
        const Shape& s = outputs[t].shape();
        const std::size_t valid = layout.valid_in_chunk(t);
        if (s.size() != 2 || s[1] != width || (s[0] != layout.chunk_len && s[0] != valid)) {
            throw InternalError("reassemble: chunk " + std::to_string(t) + " has shape " + shape_to_string(s));
        }
    }
    Tensor out({width, layout.height, layout.width});
    for (std::size_t t = 0; t < outputs.size(); ++t) {
        const Tensor& part = outputs[t].value();
        const std::size_t valid = layout.valid_in_chunk(t);
        for (std::size_t r = 0; r < valid; ++r) {
            const std::size_t token = t * layout.chunk_len + r;
            for (std::size_t c = 0; c < width; ++c) {
                out[c * tokens + token] = part[r * width + c];
            }
        }
    }
    Tape& tape = *outputs.front().tape;
    return tape.record(std::move(out), outputs, "reassemble", [outputs, layout, width, tokens](Tape& t, Var o) {
        const auto go = t.grad(o);
        for (std::size_t ci = 0; ci < outputs.size(); ++ci) {
            if (!t.requires_grad(outputs[ci])) {
                continue;
            }
            auto gp = t.grad_accumulator(outputs[ci]);
            const std::size_t valid = layout.valid_in_chunk(ci);
            for (std::size_t r = 0; r < valid; ++r) {
                const std::size_t token = ci * layout.chunk_len + r;
                for (std::size_t c = 0; c < width; ++c) {
                    gp[r * width + c] += go[c * tokens + token];
                }
            }
        }
    });
}

Var memory_branch(Var x, const BoundMemoryParams& params, const MemoryConfig& config, MemoryTrace* trace) {
    config.validate();
    const Tensor& in = x.value();
    if (in.rank() != 3 || params.proj_in.value().dim(1) != in.dim(0)) {
        throw ConfigError("memory_branch: input " + shape_to_string(in.shape()) + " does not match proj_in " +
                          shape_to_string(params.proj_in.value().shape()));
    }
    if (params.proj_in.value().dim(0) != config.c_mem) {
        throw ConfigError("memory_branch: proj_in width disagrees with c_mem");
    }
    record_memory_rollout();
    Tape& tape = *x.tape;

    Var x_mem;
    {
        CostScope scope(CostCategory::mem_bottleneck);
        x_mem = bottleneck(x, params.proj_in);
    }
    Chunked chunked = chunk(x_mem, config.chunk_len);
    MemoryState state = initial_state(tape, config);
    std::vector<Var> outputs;
    outputs.reserve(chunked.layout.num_chunks);
    if (trace) {
        trace->chunks.clear();
    }

    for (std::size_t t = 0; t < chunked.layout.num_chunks; ++t) {
        record_memory_chunk();
        const std::size_t valid = chunked.layout.valid_in_chunk(t);
        // Pad rows never enter the recurrence.
        Var tokens = valid < config.chunk_len ? slice_rows(chunked.chunks[t], 0, valid) : chunked.chunks[t];
        Qkv proj;
        Var y;
        Surprise s;
        {
            CostScope scope(CostCategory::mem_inner);
            proj = qkv(tokens, params.w_q, params.w_k, params.w_v, config.heads);
            y = retrieve(state, proj.q);
            s = surprise(state, proj.k, proj.v, valid);
        }
        Coefficients coeffs;
        {
            CostScope scope(CostCategory::mem_chunk);
            coeffs = gen_coeffs(tokens, s.loss, valid, params, config);
        }
        if (trace) {
            trace->chunks.push_back(ChunkTrace{valid, s.loss.item(), coeffs.theta.item(), coeffs.eta.item(),
                                               coeffs.alpha.item(), state.fast_weights.value()});
        }
        state = update(state, s.grad, coeffs, config.norm_cap, t);
        outputs.push_back(y);
    }

    Var retrieved = reassemble(outputs, chunked.layout);
    if (trace) {
        trace->retrieved = retrieved.value();
    }
    CostScope scope(CostCategory::mem_bottleneck);
    return pointwise_conv(retrieved, params.proj_out);
}

}  // namespace convneur
