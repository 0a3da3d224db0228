#include "convneur/optim.hpp"

#include "convneur/error.hpp"

#include <cmath>
#include <numbers>

namespace convneur {

LrSchedule LrSchedule::with_warmup_fraction(double base_lr, std::size_t total_steps, double fraction) {
    if (total_steps == 0) {
        throw ConfigError("schedule needs at least one step");
    }
    if (!(fraction >= 0.0 && fraction < 1.0)) {
        throw ConfigError("warm-up fraction must lie in [0, 1)");
    }
    return LrSchedule{base_lr, total_steps,
                      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(total_steps)))};
}

double LrSchedule::at(std::size_t step) const {
    if (step < warmup_steps) {
        return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    }
    const std::size_t decay_steps = total_steps > warmup_steps ? total_steps - warmup_steps : 1;
    const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(decay_steps));
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(std::vector<NamedTensor> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
    if (!(config_.beta1 >= 0.0 && config_.beta1 < 1.0) || !(config_.beta2 >= 0.0 && config_.beta2 < 1.0)) {
        throw ConfigError("AdamW betas must lie in [0, 1)");
    }
    if (!(config_.eps > 0.0) || !(config_.weight_decay >= 0.0)) {
        throw ConfigError("AdamW eps must be positive and weight decay non-negative");
    }
    for (const NamedTensor& p : params_) {
        m_.emplace_back(p.tensor->shape());
        v_.emplace_back(p.tensor->shape());
    }
}

void AdamW::step(double lr) {
    ++steps_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
    const double decay = 1.0 - lr * config_.weight_decay;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = *params_[i].tensor;
        auto value = p.data();
        auto m = m_[i].data();
        auto v = v_[i].data();
        if (!p.has_grad()) {
            for (double& x : value) {
                x *= decay;
            }
            continue;
        }
        const auto g = p.grad();
        for (std::size_t j = 0; j < value.size(); ++j) {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            const double m_hat = m[j] / c1, v_hat = v[j] / c2;
            value[j] = value[j] * decay - lr * m_hat / (std::sqrt(v_hat) + config_.eps);
        }
    }
}

}  // namespace convneur
