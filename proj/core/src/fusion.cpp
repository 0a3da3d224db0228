#include "convneur/fusion.hpp"

#include "convneur/counters.hpp"
#include "convneur/error.hpp"
#include "convneur/ops.hpp"

namespace convneur {

std::string_view fusion_mode_name(FusionMode mode) noexcept {
    switch (mode) {
        case FusionMode::gating: return "gating";
        case FusionMode::addition: return "addition";
        case FusionMode::concatenation: return "concatenation";
    }
    return "?";
}

FusionMode parse_fusion_mode(std::string_view text) {
    if (text == "gating") return FusionMode::gating;
    if (text == "addition") return FusionMode::addition;
    if (text == "concatenation" || text == "concat") return FusionMode::concatenation;
    throw ConfigError("unknown fusion mode '" + std::string(text) + "' (gating, addition, concatenation)");
}

void FusionConfig::validate() const {
    if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0)) {
        throw ConfigError("drop_path_rate must lie in [0, 1), got " + std::to_string(drop_path_rate));
    }
}

FusionParams FusionParams::init(std::size_t channels, FusionMode mode, Rng& rng, double std) {
    FusionParams p;
    p.gate_bias = Tensor({channels});
    if (mode == FusionMode::concatenation) {
        Tensor reduce({channels, 2 * channels});
        for (std::size_t c = 0; c < channels; ++c) {
            reduce.at(c, c) = 1.0;
            for (std::size_t j = channels; j < 2 * channels; ++j) {
                reduce.at(c, j) = rng.truncated_normal(std);
            }
        }
        p.concat_reduce = std::move(reduce);
    }
    return p;
}

std::vector<NamedTensor> FusionParams::named(const std::string& prefix) {
    std::vector<NamedTensor> out{{prefix + "gate_bias", &gate_bias}};
    if (concat_reduce) {
        out.push_back({prefix + "concat_reduce", &*concat_reduce});
    }
    return out;
}

BoundFusionParams bind(Tape& tape, FusionParams& p) {
    BoundFusionParams b;
    b.gate_bias = tape.parameter(p.gate_bias);
    if (p.concat_reduce) {
        b.concat_reduce = tape.parameter(*p.concat_reduce);
    }
    return b;
}

namespace {

// out[c, p] = x[c, p] + bias[c]
Var add_channel_bias(Var x, Var bias) {
    const Tensor& in = x.value();
    const Tensor& b = bias.value();
    if (in.rank() != 3 || b.rank() != 1 || b.dim(0) != in.dim(0)) {
        throw ConfigError("gate: bias " + shape_to_string(b.shape()) + " does not match map " +
                          shape_to_string(in.shape()));
    }
    const std::size_t c = in.dim(0), plane = in.dim(1) * in.dim(2);
    Tensor out = in;
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t p = 0; p < plane; ++p) {
            out[ch * plane + p] += b[ch];
        }
    }
    return x.tape->record(std::move(out), {x, bias}, "add_channel_bias", [x, bias, c, plane](Tape& t, Var o) {
        const auto go = t.grad(o);
        if (t.requires_grad(x)) {
            auto gx = t.grad_accumulator(x);
            for (std::size_t i = 0; i < gx.size(); ++i) {
                gx[i] += go[i];
            }
        }
        if (t.requires_grad(bias)) {
            auto gb = t.grad_accumulator(bias);
            for (std::size_t ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (std::size_t p = 0; p < plane; ++p) {
                    acc += go[ch * plane + p];
                }
                gb[ch] += acc;
            }
        }
    });
}

// out[c, p] = mean over c' of x[c', p]
Var channel_mean_broadcast(Var x) {
    const Tensor& in = x.value();
    const std::size_t c = in.dim(0), plane = in.numel() / c;
    Tensor out(in.shape());
    for (std::size_t p = 0; p < plane; ++p) {
        double acc = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) {
            acc += in[ch * plane + p];
        }
        for (std::size_t ch = 0; ch < c; ++ch) {
            out[ch * plane + p] = acc / static_cast<double>(c);
        }
    }
    return x.tape->record(std::move(out), {x}, "channel_mean_broadcast", [x, c, plane](Tape& t, Var o) {
        const auto go = t.grad(o);
        auto gx = t.grad_accumulator(x);
        for (std::size_t p = 0; p < plane; ++p) {
            double acc = 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) {
                acc += go[ch * plane + p];
            }
            for (std::size_t ch = 0; ch < c; ++ch) {
                gx[ch * plane + p] += acc / static_cast<double>(c);
            }
        }
    });
}

}  // namespace

Var gate(Var g, Var gate_bias, bool channel_shared) {
    Var pre = channel_shared ? channel_mean_broadcast(g) : g;
    return sigmoid(add_channel_bias(pre, gate_bias));
}

bool drop_path_keep(double rate, std::uint64_t seed) noexcept {
    return unit_from_bits(splitmix64(seed)) >= rate;
}

Var drop_path(Var x, double rate, bool training, std::uint64_t seed) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw ConfigError("drop_path rate must lie in [0, 1)");
    }
    if (!training || rate == 0.0) {
        return x;
    }
    return scale(x, drop_path_keep(rate, seed) ? 1.0 / (1.0 - rate) : 0.0);
}

Var drop_path_batch(Var x, double rate, bool training, std::uint64_t seed) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw ConfigError("drop_path rate must lie in [0, 1)");
    }
    if (!training || rate == 0.0) {
        return x;
    }
    const Tensor& in = x.value();
    const std::size_t batch = in.dim(0), per = in.numel() / batch;
    Tensor mask(in.shape());
    for (std::size_t b = 0; b < batch; ++b) {
        const double factor = drop_path_keep(rate, mix_seed(seed, b)) ? 1.0 / (1.0 - rate) : 0.0;
        for (std::size_t i = 0; i < per; ++i) {
            mask[b * per + i] = factor;
        }
    }
    return mul(x, x.tape->constant(std::move(mask)));
}

Var fuse(Var x, Var f_loc, Var g, const BoundFusionParams& params, const FusionConfig& config, bool training,
         std::uint64_t seed, double drop_rate) {
    if (x.shape() != f_loc.shape() || (g.valid() && g.shape() != x.shape())) {
        throw ConfigError("fuse: x " + shape_to_string(x.shape()) + ", f_loc " + shape_to_string(f_loc.shape()) +
                          (g.valid() ? ", g " + shape_to_string(g.shape()) : std::string()) + " disagree");
    }
    CostScope scope(CostCategory::fusion);
    Var update = f_loc;
    if (g.valid()) {
        switch (config.mode) {
            case FusionMode::gating:
                update = mul(gate(g, params.gate_bias, config.channel_shared_gate), f_loc);
                break;
            case FusionMode::addition:
                update = add(f_loc, g);
                break;
            case FusionMode::concatenation:
                if (!params.concat_reduce.valid()) {
                    throw ConfigError("fuse: concatenation mode requires concat_reduce");
                }
                update = pointwise_conv(concat_rows({f_loc, g}), params.concat_reduce);
                break;
        }
    }
    return add(x, drop_path(update, drop_rate, training, seed));
}

}  // namespace convneur
