#include "convneur/local_branch.hpp"

#include "convneur/counters.hpp"
#include "convneur/error.hpp"
#include "convneur/ops.hpp"

namespace convneur {

void LocalBranchConfig::validate() const {
    if (kernel % 2 == 0) {
        throw ConfigError("local branch kernel must be odd, got " + std::to_string(kernel));
    }
    if (expansion < 1) {
        throw ConfigError("local branch expansion ratio must be at least 1");
    }
    if (!(norm_eps > 0.0)) {
        throw ConfigError("local branch norm eps must be positive");
    }
}

LocalBranchParams LocalBranchParams::init(std::size_t channels, const LocalBranchConfig& config, Rng& rng,
                                          double std) {
    config.validate();
    const std::size_t k = config.kernel, hidden = config.expansion * channels;
    LocalBranchParams p;
    p.dw_kernel = Tensor({channels, k, k});
    for (double& v : p.dw_kernel.data()) {
        v = rng.truncated_normal(std);
    }
    p.dw_bias = Tensor({channels});
    p.norm_gamma = Tensor({channels}, 1.0);
    p.norm_beta = Tensor({channels});
    p.mix_up = Tensor({hidden, channels});
    for (double& v : p.mix_up.data()) {
        v = rng.truncated_normal(std);
    }
    p.mix_up_bias = Tensor({hidden});
    p.mix_down = Tensor({channels, hidden});
    for (double& v : p.mix_down.data()) {
        v = rng.truncated_normal(std);
    }
    p.mix_down_bias = Tensor({channels});
    return p;
}

LocalBranchParams LocalBranchParams::identity(std::size_t channels, const LocalBranchConfig& config) {
    config.validate();
    if (config.expansion < 2) {
        throw ConfigError("identity local branch needs expansion >= 2");
    }
    const std::size_t k = config.kernel, hidden = config.expansion * channels;
    LocalBranchParams p;
    p.dw_kernel = Tensor({channels, k, k});
    for (std::size_t c = 0; c < channels; ++c) {
        p.dw_kernel.at(c, k / 2, k / 2) = 1.0;
    }
    p.dw_bias = Tensor({channels});
    p.norm_gamma = Tensor({channels}, 1.0);
    p.norm_beta = Tensor({channels});
    // gelu(u) - gelu(-u) = u, so routing +u and -u through the expansion
    // makes the mixing an exact identity.
    p.mix_up = Tensor({hidden, channels});
    p.mix_down = Tensor({channels, hidden});
    for (std::size_t c = 0; c < channels; ++c) {
        p.mix_up.at(c, c) = 1.0;
        p.mix_up.at(channels + c, c) = -1.0;
        p.mix_down.at(c, c) = 1.0;
        p.mix_down.at(c, channels + c) = -1.0;
    }
    p.mix_up_bias = Tensor({hidden});
    p.mix_down_bias = Tensor({channels});
    return p;
}

std::vector<NamedTensor> LocalBranchParams::named(const std::string& prefix) {
    return {
        {prefix + "dw_kernel", &dw_kernel},     {prefix + "dw_bias", &dw_bias},
        {prefix + "norm_gamma", &norm_gamma},   {prefix + "norm_beta", &norm_beta},
        {prefix + "mix_up", &mix_up},           {prefix + "mix_up_bias", &mix_up_bias},
        {prefix + "mix_down", &mix_down},       {prefix + "mix_down_bias", &mix_down_bias},
    };
}

BoundLocalParams bind(Tape& tape, LocalBranchParams& p) {
    return BoundLocalParams{
        tape.parameter(p.dw_kernel),  tape.parameter(p.dw_bias),     tape.parameter(p.norm_gamma),
        tape.parameter(p.norm_beta),  tape.parameter(p.mix_up),      tape.parameter(p.mix_up_bias),
        tape.parameter(p.mix_down),   tape.parameter(p.mix_down_bias),
    };
}

Var local_forward(Var x, const BoundLocalParams& p, double norm_eps) {
    const Tensor& in = x.value();
    const Tensor& kernel = p.dw_kernel.value();
    if (in.rank() != 3 || kernel.rank() != 3 || in.dim(0) != kernel.dim(0)) {
        throw ConfigError("local_forward: input " + shape_to_string(in.shape()) + " does not match kernel " +
                          shape_to_string(kernel.shape()));
    }
    const std::size_t k = kernel.dim(1);
    if (k % 2 == 0) {
        throw ConfigError("local_forward: kernel extent must be odd");
    }
    CostScope scope(CostCategory::local);
    Var h = depthwise_conv2d(x, p.dw_kernel, 1, k / 2, p.dw_bias);
    h = channel_norm(h, p.norm_gamma, p.norm_beta, norm_eps);
    h = gelu(pointwise_conv(h, p.mix_up, p.mix_up_bias));
    return pointwise_conv(h, p.mix_down, p.mix_down_bias);
}

}  // namespace convneur
