#include "convneur/tape.hpp"

#include "convneur/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <mutex>
#include <optional>

namespace convneur {

namespace {

struct Fault {
    std::string op_name;
    double factor = 1.0;
};

std::optional<Fault>& fault_slot() {
    static std::optional<Fault> slot;
    return slot;
}

}  // namespace

FaultInjection::FaultInjection(std::string op_name, double factor) {
    fault_slot() = Fault{std::move(op_name), factor};
}

FaultInjection::~FaultInjection() { fault_slot().reset(); }

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::push(Node node) {
    nodes_.push_back(std::move(node));
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor value) {
    Node n;
    n.owned = std::move(value);
    return push(std::move(n));
}

Var Tape::constant_ref(const Tensor& value) {
    Node n;
    n.borrowed = &value;
    return push(std::move(n));
}

Var Tape::parameter(Tensor& param) {
    Node n;
    n.borrowed = &param;
    n.sink = &param;
    n.requires_grad = grad_enabled_;
    return push(std::move(n));
}

const Tensor& Tape::value(Var v) const {
    const Node& n = nodes_[v.id];
    return n.borrowed ? *n.borrowed : n.owned;
}

bool Tape::requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

std::span<double> Tape::grad_accumulator(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty()) {
        n.grad.assign(value(v).numel(), 0.0);
    }
    return n.grad;
}

std::span<const double> Tape::grad(Var v) const { return nodes_[v.id].grad; }

Var Tape::record_impl(Tensor output, bool needs_grad, const char* op_name, BackwardRule rule) {
    Node n;
    n.owned = std::move(output);
    n.requires_grad = needs_grad;
    Var out = push(std::move(n));
    if (needs_grad) {
        ops_.push_back(Op{out.id, op_name, std::move(rule)});
    }
    return out;
}

Var Tape::record(Tensor output, std::initializer_list<Var> inputs, const char* op_name, BackwardRule rule) {
    bool needs = false;
    if (grad_enabled_) {
        for (const Var& in : inputs) {
            if (in.valid()) {
                if (in.tape != this) {
                    throw InternalError(std::string("op ") + op_name + " mixes variables from different tapes");
                }
                needs = needs || nodes_[in.id].requires_grad;
            }
        }
    }
    return record_impl(std::move(output), needs, op_name, std::move(rule));
}

Var Tape::record(Tensor output, const std::vector<Var>& inputs, const char* op_name, BackwardRule rule) {
    bool needs = false;
    if (grad_enabled_) {
        for (const Var& in : inputs) {
            if (in.valid()) {
                if (in.tape != this) {
                    throw InternalError(std::string("op ") + op_name + " mixes variables from different tapes");
                }
                needs = needs || nodes_[in.id].requires_grad;
            }
        }
    }
    return record_impl(std::move(output), needs, op_name, std::move(rule));
}

void Tape::backward(Var loss) {
    if (loss.tape != this) {
        throw UsageError("backward called with a variable from another tape");
    }
    if (value(loss).numel() != 1) {
        throw UsageError("backward requires a scalar loss, got shape " + shape_to_string(value(loss).shape()));
    }
    if (backward_done_) {
        throw UsageError("backward may only run once per tape");
    }
    backward_done_ = true;
    if (!nodes_[loss.id].requires_grad) {
        return;
    }
    grad_accumulator(loss)[0] = 1.0;

    const auto& fault = fault_slot();
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
        Node& out = nodes_[it->output];
        if (out.grad.empty()) {
            continue;
        }
        if (fault && fault->op_name == it->name) {
            for (double& g : out.grad) {
                g *= fault->factor;
            }
        }
        it->rule(*this, Var{this, it->output});
    }

    for (Node& n : nodes_) {
        if (n.sink && !n.grad.empty()) {
            auto dst = n.sink->grad();
            for (std::size_t i = 0; i < dst.size(); ++i) {
                dst[i] += n.grad[i];
            }
        }
    }
}

}  // namespace convneur
