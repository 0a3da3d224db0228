#pragma once

#include "convneur/tape.hpp"

#include <cstddef>
#include <vector>

namespace convneur {

// Differentiable operations on tape variables. Binary elementwise ops accept
// either identical shapes or a single-element operand (scalar broadcast);
// anything else is a ConfigError.

enum class ElementwiseOp { add, mul, sigmoid, gelu, softplus };

Var elementwise(ElementwiseOp op, Var a, Var b = {});

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
Var sigmoid(Var a);
// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
Var gelu(Var a);
Var softplus(Var a);
Var square(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

Var sum(Var a);
Var mean(Var a);

Var reshape(Var a, Shape shape);
// Rows [start, start + count) along axis 0.
Var slice_rows(Var a, std::size_t start, std::size_t count);
// Concatenation along axis 0; trailing extents must agree.
Var concat_rows(const std::vector<Var>& parts);
// Mean over the first `count` rows of a [R, C] matrix, giving [C].
Var mean_rows(Var a, std::size_t count);

// Per-channel cross-correlation of x [C,H,W] with kernel [C,k,k].
Var depthwise_conv2d(Var x, Var kernel, std::size_t stride, std::size_t padding, Var bias = {});
// weight [C_out, C_in] applied at every location of x [C_in, H, W].
Var pointwise_conv(Var x, Var weight, Var bias = {});
// [C, H, W] -> [C*b*b, H/b, W/b]; output channel c*b*b + dy*b + dx.
Var space_to_depth(Var x, std::size_t block);
// [C, H, W] -> [C]
Var global_avg_pool(Var x);

// Normalizes over the last axis.
Var layer_norm(Var x, Var gamma, Var beta, double eps);
// Normalizes over axis 0 of a [C, ...] tensor, independently per position.
Var channel_norm(Var x, Var gamma, Var beta, double eps);

// op(a) * op(b) for 2-D operands, or batched over a shared leading axis for 3-D.
Var matmul(Var a, Var b, bool transpose_a = false, bool transpose_b = false);
// x [N] or [R, N]; weight [M, N]; optional bias [M].
Var linear(Var x, Var weight, Var bias = {});

// [L, H*d] <-> [H, L, d]
Var split_heads(Var x, std::size_t heads);
Var merge_heads(Var x);

// Rescales each leading-axis slice whose Frobenius norm exceeds `cap` to norm `cap`.
Var frobenius_cap(Var x, double cap);

// Softmax cross-entropy of logits [K] against `target`, with the target
// distribution (1 - smoothing) one-hot + smoothing / K.
Var cross_entropy(Var logits, std::size_t target, double smoothing);

// Throws NumericalError naming `what` if any element is NaN or infinite.
void require_finite(Var v, const std::string& what);

}  // namespace convneur
