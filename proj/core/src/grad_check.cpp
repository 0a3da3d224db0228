#include "convneur/grad_check.hpp"

#include "convneur/error.hpp"

#include <cmath>

namespace convneur {

namespace {

double evaluate(const ScalarFunction& f) {
    Tape tape(false);
    return f(tape).item();
}

}  // namespace

GradCheckResult grad_check(const ScalarFunction& f, std::span<const NamedTensor> params, double eps) {
    if (!(eps >= 1e-7 && eps <= 1e-3)) {
        throw UsageError("grad_check: eps must lie in [1e-7, 1e-3]");
    }

    std::vector<std::vector<double>> analytic;
    {
        for (const auto& p : params) {
            p.tensor->zero_grad();
        }
        Tape tape(true);
        Var loss = f(tape);
        if (!std::isfinite(loss.item())) {
            throw NumericalError("grad_check: non-finite loss at the base point");
        }
        tape.backward(loss);
        for (const auto& p : params) {
            auto g = p.tensor->grad();
            analytic.emplace_back(g.begin(), g.end());
            p.tensor->drop_grad();
        }
    }

    GradCheckResult result;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const auto& p = params[pi];
        auto values = p.tensor->data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + eps;
            const double up = evaluate(f);
            values[i] = saved - eps;
            const double down = evaluate(f);
            values[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                throw NumericalError("grad_check: non-finite value while probing " + p.name + "[" +
                                     std::to_string(i) + "]");
            }
            const double numeric = (up - down) / (2.0 * eps);
            const double err = std::abs(analytic[pi][i] - numeric) / std::max(1.0, std::abs(numeric));
            ++result.probes;
            if (err > result.max_rel_error || result.worst_param.empty()) {
                result.max_rel_error = std::max(result.max_rel_error, err);
                if (err >= result.max_rel_error) {
                    result.worst_param = p.name;
                    result.worst_index = i;
                    result.analytic = analytic[pi][i];
                    result.numeric = numeric;
                }
            }
        }
    }
    return result;
}

}  // namespace convneur
