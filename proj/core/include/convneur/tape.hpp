#pragma once

#include "convneur/tensor.hpp"

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace convneur {

class Tape;

// Handle to a value recorded on a tape. Cheap to copy; only valid while the
// tape that created it is alive.
struct Var {
    Tape* tape = nullptr;
    std::uint32_t id = 0;

    bool valid() const noexcept { return tape != nullptr; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t numel() const { return value().numel(); }
    double item() const { return value().item(); }
};

// Receives the tape and the op's output handle.
using BackwardRule = std::function<void(Tape&, Var)>;

// Eager reverse-mode tape. Every op appends its output node and, when any input
// needs a gradient, a backward rule. Records are naturally in topological
// order, so backward is a single reverse sweep.
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const noexcept { return grad_enabled_; }

    Var constant(Tensor value);
    // Borrows `value` without copying; it must outlive the tape.
    Var constant_ref(const Tensor& value);
    // Borrows a parameter; backward() accumulates into param.grad().
    Var parameter(Tensor& param);

    const Tensor& value(Var v) const;
    bool requires_grad(Var v) const;

    // Gradient buffer of a node, allocated on first use. Backward rules write
    // into their inputs through this.
    std::span<double> grad_accumulator(Var v);
    // Read-only gradient; empty if nothing flowed into the node.
    std::span<const double> grad(Var v) const;

    // Appends an output node produced from `inputs`. The rule runs during
    // backward() only if the output received a gradient.
    Var record(Tensor output, std::initializer_list<Var> inputs, const char* op_name, BackwardRule rule);
    Var record(Tensor output, const std::vector<Var>& inputs, const char* op_name, BackwardRule rule);

    // Seeds d(loss)/d(loss) = 1 and sweeps the records in reverse. The loss
    // must hold exactly one element. May be called once per tape.
    void backward(Var loss);

    std::size_t node_count() const noexcept { return nodes_.size(); }
    std::size_t op_count() const noexcept { return ops_.size(); }

private:
    struct Node {
        Tensor owned;
        const Tensor* borrowed = nullptr;
        Tensor* sink = nullptr;
        std::vector<double> grad;
        bool requires_grad = false;
    };
    struct Op {
        std::uint32_t output;
        const char* name;
        BackwardRule rule;
    };

    Var push(Node node);
    Var record_impl(Tensor output, bool needs_grad, const char* op_name, BackwardRule rule);

    bool grad_enabled_;
    bool backward_done_ = false;
    std::deque<Node> nodes_;
    std::vector<Op> ops_;
};

// Test fixture hook: while alive, the backward rule of the named op receives an
// output gradient scaled by `factor`, producing a deliberately wrong gradient.
class FaultInjection {
public:
    FaultInjection(std::string op_name, double factor = 1.5);
    ~FaultInjection();
    FaultInjection(const FaultInjection&) = delete;
    FaultInjection& operator=(const FaultInjection&) = delete;
};

}  // namespace convneur
