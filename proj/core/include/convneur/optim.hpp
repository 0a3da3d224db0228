#pragma once

#include "convneur/grad_check.hpp"

#include <cstddef>
#include <vector>

namespace convneur {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

// Linear warm-up over the first `warmup_steps`, then cosine decay to zero at `total_steps`.
struct LrSchedule {
    double base_lr = 3e-3;
    std::size_t total_steps = 1;
    std::size_t warmup_steps = 0;

    static LrSchedule with_warmup_fraction(double base_lr, std::size_t total_steps, double fraction);
    double at(std::size_t step) const;
};

// Decoupled weight decay: p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps).
class AdamW {
public:
    AdamW(std::vector<NamedTensor> params, AdamWConfig config);

    // Applies one update from the gradients currently stored on the parameters.
    void step(double lr);

    std::size_t step_count() const noexcept { return steps_; }
    const std::vector<Tensor>& first_moments() const noexcept { return m_; }
    const std::vector<Tensor>& second_moments() const noexcept { return v_; }
    const AdamWConfig& config() const noexcept { return config_; }

private:
    std::vector<NamedTensor> params_;
    AdamWConfig config_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    std::size_t steps_ = 0;
};

}  // namespace convneur
