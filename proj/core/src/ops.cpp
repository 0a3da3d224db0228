#include "convneur/ops.hpp"

#include "convneur/counters.hpp"
#include "convneur/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace convneur {

namespace {

constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

Tape& tape_of(Var a) {
    if (!a.valid()) {
        throw UsageError("operation on an unbound variable");
    }
    return *a.tape;
}

// Gradient buffer for an input, or an empty span if it does not need one.
std::span<double> input_grad(Tape& tape, Var v) {
    if (!v.valid() || !tape.requires_grad(v)) {
        return {};
    }
    return tape.grad_accumulator(v);
}

double stable_sigmoid(double x) {
    double s;
    if (x >= 0.0) {
        s = 1.0 / (1.0 + std::exp(-x));
    } else {
        const double e = std::exp(x);
        s = e / (1.0 + e);
    }
    // Keep the open-interval guarantee where the tails round to 0 or 1.
    return std::clamp(s, std::numeric_limits<double>::denorm_min(), std::nextafter(1.0, 0.0));
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

enum class Broadcast { same, scalar_a, scalar_b };

Broadcast broadcast_mode(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) {
        return Broadcast::same;
    }
    if (b.numel() == 1) {
        return Broadcast::scalar_b;
    }
    if (a.numel() == 1) {
        return Broadcast::scalar_a;
    }
    throw ConfigError(std::string(op) + ": incompatible shapes " + shape_to_string(a.shape()) + " and " +
                      shape_to_string(b.shape()));
}

// Generic row-major GEMM: C (m x n) += op(A) * op(B), inner extent k.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n, bool ta,
          bool tb) {
    if (!ta && !tb) {
        for (std::size_t i = 0; i < m; ++i) {
            double* crow = c + i * n;
            const double* arow = a + i * k;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = arow[p];
                const double* brow = b + p * n;
                for (std::size_t j = 0; j < n; ++j) {
                    crow[j] += av * brow[j];
                }
            }
        }
    } else if (ta && !tb) {
        // A stored [k, m]
        for (std::size_t p = 0; p < k; ++p) {
            const double* arow = a + p * m;
            const double* brow = b + p * n;
            for (std::size_t i = 0; i < m; ++i) {
                const double av = arow[i];
                double* crow = c + i * n;
                for (std::size_t j = 0; j < n; ++j) {
                    crow[j] += av * brow[j];
                }
            }
        }
    } else if (!ta && tb) {
        // B stored [n, k]
        for (std::size_t i = 0; i < m; ++i) {
            const double* arow = a + i * k;
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double* brow = b + j * k;
                double acc = 0.0;
                for (std::size_t p = 0; p < k; ++p) {
                    acc += arow[p] * brow[p];
                }
                crow[j] += acc;
            }
        }
    } else {
        for (std::size_t i = 0; i < m; ++i) {
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double* brow = b + j * k;
                double acc = 0.0;
                for (std::size_t p = 0; p < k; ++p) {
                    acc += a[p * m + i] * brow[p];
                }
                crow[j] += acc;
            }
        }
    }
}

template <typename F, typename D>
Var unary(Var a, const char* name, F forward, D derivative) {
    Tape& tape = tape_of(a);
    const Tensor& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        out[i] = forward(x[i]);
    }
    return tape.record(std::move(out), {a}, name, [a, derivative](Tape& t, Var o) {
        auto ga = input_grad(t, a);
        if (ga.empty()) {
            return;
        }
        const auto go = t.grad(o);
        const Tensor& x = a.value();
        const Tensor& y = o.value();
        for (std::size_t i = 0; i < ga.size(); ++i) {
            ga[i] += go[i] * derivative(x[i], y[i]);
        }
    });
}

}  // namespace

Var elementwise(ElementwiseOp op, Var a, Var b) {
    switch (op) {
        case ElementwiseOp::add:
            return add(a, b);
        case ElementwiseOp::mul:
            return mul(a, b);
        case ElementwiseOp::sigmoid:
            return sigmoid(a);
        case ElementwiseOp::gelu:
            return gelu(a);
        case ElementwiseOp::softplus:
            return softplus(a);
    }
    throw InternalError("unknown elementwise op");
}

Var add(Var a, Var b) {
    Tape& tape = tape_of(a);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    const Broadcast mode = broadcast_mode(x, y, "add");
    Tensor out(mode == Broadcast::scalar_a ? y.shape() : x.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const double xv = mode == Broadcast::scalar_a ? x[0] : x[i];
        const double yv = mode == Broadcast::scalar_b ? y[0] : y[i];
        out[i] = xv + yv;
    }
    return tape.record(std::move(out), {a, b}, "add", [a, b, mode](Tape& t, Var o) {
        const auto go = t.grad(o);
        if (auto ga = input_grad(t, a); !ga.empty()) {
            if (mode == Broadcast::scalar_a) {
                ga[0] += std::accumulate(go.begin(), go.end(), 0.0);
            } else {
                for (std::size_t i = 0; i < go.size(); ++i) {
                    ga[i] += go[i];
                }
            }
        }
        if (auto gb = input_grad(t, b); !gb.empty()) {
            if (mode == Broadcast::scalar_b) {
                gb[0] += std::accumulate(go.begin(), go.end(), 0.0);
            } else {
                for (std::size_t i = 0; i < go.size(); ++i) {
                    gb[i] += go[i];
                }
            }
        }
    });
}

Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var mul(Var a, Var b) {
    Tape& tape = tape_of(a);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    const Broadcast mode = broadcast_mode(x, y, "mul");
    Tensor out(mode == Broadcast::scalar_a ? y.shape() : x.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const double xv = mode == Broadcast::scalar_a ? x[0] : x[i];
        const double yv = mode == Broadcast::scalar_b ? y[0] : y[i];
        out[i] = xv * yv;
    }
    return tape.record(std::move(out), {a, b}, "mul", [a, b, mode](Tape& t, Var o) {
        const auto go = t.grad(o);
        const Tensor& x = a.value();
        const Tensor& y = b.value();
        const std::size_t n = go.size();
        if (auto ga = input_grad(t, a); !ga.empty()) {
            if (mode == Broadcast::scalar_a) {
                double acc = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    acc += go[i] * y[i];
                }
                ga[0] += acc;
            } else {
                for (std::size_t i = 0; i < n; ++i) {
                    ga[i] += go[i] * (mode == Broadcast::scalar_b ? y[0] : y[i]);
                }
            }
        }
        if (auto gb = input_grad(t, b); !gb.empty()) {
            if (mode == Broadcast::scalar_b) {
                double acc = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    acc += go[i] * x[i];
                }
                gb[0] += acc;
            } else {
                for (std::size_t i = 0; i < n; ++i) {
                    gb[i] += go[i] * (mode == Broadcast::scalar_a ? x[0] : x[i]);
                }
            }
        }
    });
}

Var scale(Var a, double factor) {
    return unary(
        a, "scale", [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Var add_scalar(Var a, double offset) {
    return unary(
        a, "add_scalar", [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Var sigmoid(Var a) {
    return unary(a, "sigmoid", stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var gelu(Var a) {
    return unary(
        a, "gelu",
        [](double x) { return 0.5 * x * (1.0 + std::tanh(kGeluScale * (x + kGeluCubic * x * x * x))); },
        [](double x, double) {
            const double th = std::tanh(kGeluScale * (x + kGeluCubic * x * x * x));
            return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluScale * (1.0 + 3.0 * kGeluCubic * x * x);
        });
}

Var softplus(Var a) {
    return unary(a, "softplus", stable_softplus, [](double x, double) { return stable_sigmoid(x); });
}

Var square(Var a) {
    return unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sum(Var a) {
    Tape& tape = tape_of(a);
    const Tensor& x = a.value();
    double s = 0.0;
    for (double v : x.data()) {
        s += v;
    }
    return tape.record(Tensor::scalar(s), {a}, "sum", [a](Tape& t, Var o) {
        auto ga = input_grad(t, a);
        const double g = t.grad(o)[0];
        for (double& v : ga) {
            v += g;
        }
    });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Var reshape(Var a, Shape shape) {
    Tape& tape = tape_of(a);
    Tensor out = a.value().reshaped(std::move(shape));
    return tape.record(std::move(out), {a}, "reshape", [a](Tape& t, Var o) {
        auto ga = input_grad(t, a);
        const auto go = t.grad(o);
        for (std::size_t i = 0; i < ga.size(); ++i) {
            ga[i] += go[i];
        }
    });
}

Var slice_rows(Var a, std::size_t start, std::size_t count) {
    Tape& tape = tape_of(a);
    const Tensor& x = a.value();
    if (x.rank() < 1 || count == 0 || start + count > x.dim(0)) {
        throw ConfigError("slice_rows: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                          ") outside shape " + shape_to_string(x.shape()));
    }
    const std::size_t row = x.numel() / x.dim(0);
    Shape shape = x.shape();
    shape[0] = count;
    Tensor out(shape);
    std::copy_n(x.data().begin() + start * row, count * row, out.data().begin());
    return tape.record(std::move(out), {a}, "slice_rows", [a, start, row](Tape& t, Var o) {
        auto ga = input_grad(t, a);
        const auto go = t.grad(o);
        for (std::size_t i = 0; i < go.size(); ++i) {
            ga[start * row + i] += go[i];
        }
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) {
        throw UsageError("concat_rows of nothing");
    }
    Tape& tape = tape_of(parts.front());
    Shape shape = parts.front().shape();
    std::size_t rows = 0;
    for (const Var& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != shape.size() || !std::equal(s.begin() + 1, s.end(), shape.begin() + 1)) {
            throw ConfigError("concat_rows: trailing extents differ between " + shape_to_string(shape) + " and " +
                              shape_to_string(s));
        }
        rows += s[0];
    }
    shape[0] = rows;
    Tensor out(shape);
    std::size_t offset = 0;
    for (const Var& p : parts) {
        const Tensor& v = p.value();
        std::copy(v.data().begin(), v.data().end(), out.data().begin() + offset);
        offset += v.numel();
    }
    return tape.record(std::move(out), parts, "concat_rows", [parts](Tape& t, Var o) {
        const auto go = t.grad(o);
        std::size_t offset = 0;
        for (const Var& p : parts) {
            const std::size_t n = p.numel();
            if (auto gp = input_grad(t, p); !gp.empty()) {
                for (std::size_t i = 0; i < n; ++i) {
                    gp[i] += go[offset + i];
                }
            }
            offset += n;
        }
    });
}

Var mean_rows(Var a, std::size_t count) {
    Tape& tape = tape_of(a);
    const Tensor& x = a.value();
    if (x.rank() != 2 || count == 0 || count > x.dim(0)) {
        throw ConfigError("mean_rows: need a matrix with at least " + std::to_string(count) + " rows, got " +
                          shape_to_string(x.shape()));
    }
    const std::size_t cols = x.dim(1);
    Tensor out({cols});
    for (std::size_t r = 0; r < count; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out[c] += x[r * cols + c];
        }
    }
    const double inv = 1.0 / static_cast<double>(count);
    for (double& v : out.data()) {
        v *= inv;
    }
    return tape.record(std::move(out), {a}, "mean_rows", [a, count, cols, inv](Tape& t, Var o) {
        auto ga = input_grad(t, a);
        const auto go = t.grad(o);
        for (std::size_t r = 0; r < count; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                ga[r * cols + c] += go[c] * inv;
            }
        }
    });
}

Var depthwise_conv2d(Var x, Var kernel, std::size_t stride, std::size_t padding, Var bias) {
    Tape& tape = tape_of(x);
    const Tensor& in = x.value();
    const Tensor& k = kernel.value();
    if (in.rank() != 3 || k.rank() != 3 || k.dim(1) != k.dim(2)) {
        throw ConfigError("depthwise_conv2d expects x [C,H,W] and kernel [C,k,k], got " +
                          shape_to_string(in.shape()) + " and " + shape_to_string(k.shape()));
    }
    if (k.dim(0) != in.dim(0)) {
        throw ConfigError("depthwise_conv2d: kernel has " + std::to_string(k.dim(0)) + " channels, input has " +
                          std::to_string(in.dim(0)));
    }
    if (stride == 0) {
        throw ConfigError("depthwise_conv2d: stride must be positive");
    }
    const std::size_t channels = in.dim(0), h = in.dim(1), w = in.dim(2), ks = k.dim(1);
    if (h + 2 * padding < ks || w + 2 * padding < ks || (h + 2 * padding - ks) % stride != 0 ||
        (w + 2 * padding - ks) % stride != 0) {
        throw ConfigError("depthwise_conv2d: padding " + std::to_string(padding) + " and stride " +
                          std::to_string(stride) + " give a non-integer output extent for input " +
                          shape_to_string(in.shape()) + " and kernel " + std::to_string(ks));
    }
    if (bias.valid() && bias.numel() != channels) {
        throw ConfigError("depthwise_conv2d: bias length does not match channels");
    }
    const std::size_t oh = (h + 2 * padding - ks) / stride + 1;
    const std::size_t ow = (w + 2 * padding - ks) / stride + 1;
    const auto p = static_cast<std::ptrdiff_t>(padding);
    const auto s = static_cast<std::ptrdiff_t>(stride);

    // Output columns ox whose input column ox*s + kx - p lies inside [0, w).
    auto col_range = [=](std::size_t kx) {
        const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - p;
        std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
        std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(w) - 1 - off);
        hi = hi < 0 ? -1 : hi / s;
        hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(ow) - 1);
        return std::pair<std::ptrdiff_t, std::ptrdiff_t>{lo, hi};
    };

    Tensor out({channels, oh, ow});
    for (std::size_t c = 0; c < channels; ++c) {
        const double* src = in.data().data() + c * h * w;
        const double* kc = k.data().data() + c * ks * ks;
        double* dst = out.data().data() + c * oh * ow;
        if (bias.valid()) {
            std::fill_n(dst, oh * ow, bias.value()[c]);
        }
        for (std::size_t ky = 0; ky < ks; ++ky) {
            for (std::size_t kx = 0; kx < ks; ++kx) {
                const double wv = kc[ky * ks + kx];
                const auto [lo, hi] = col_range(kx);
                if (lo > hi) {
                    continue;
                }
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * s + static_cast<std::ptrdiff_t>(ky) - p;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
                        continue;
                    }
                    const std::ptrdiff_t row_off =
                        iy * static_cast<std::ptrdiff_t>(w) + static_cast<std::ptrdiff_t>(kx) - p;
                    double* drow = dst + oy * ow;
                    for (std::ptrdiff_t ox = lo; ox <= hi; ++ox) {
                        drow[ox] += wv * src[row_off + ox * s];
                    }
                }
            }
        }
    }
    record_macs(static_cast<std::uint64_t>(channels) * ks * ks * oh * ow);

    return tape.record(
        std::move(out), {x, kernel, bias}, "depthwise_conv2d",
        [=](Tape& t, Var o) {
            const auto go = t.grad(o);
            const Tensor& in = x.value();
            const Tensor& k = kernel.value();
            auto gx = input_grad(t, x);
            auto gk = input_grad(t, kernel);
            auto gb = input_grad(t, bias);
            for (std::size_t c = 0; c < channels; ++c) {
                const double* src = in.data().data() + c * h * w;
                const double* kc = k.data().data() + c * ks * ks;
                const double* gsrc = go.data() + c * oh * ow;
                if (!gb.empty()) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < oh * ow; ++i) {
                        acc += gsrc[i];
                    }
                    gb[c] += acc;
                }
                for (std::size_t ky = 0; ky < ks; ++ky) {
                    for (std::size_t kx = 0; kx < ks; ++kx) {
                        const double wv = kc[ky * ks + kx];
                        const auto [lo, hi] = col_range(kx);
                        if (lo > hi) {
                            continue;
                        }
                        double wacc = 0.0;
                        for (std::size_t oy = 0; oy < oh; ++oy) {
                            const std::ptrdiff_t iy =
                                static_cast<std::ptrdiff_t>(oy) * s + static_cast<std::ptrdiff_t>(ky) - p;
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
                                continue;
                            }
                            const std::ptrdiff_t row_off =
                                iy * static_cast<std::ptrdiff_t>(w) + static_cast<std::ptrdiff_t>(kx) - p;
                            const double* grow = gsrc + oy * ow;
                            if (!gx.empty()) {
                                double* gxc = gx.data() + c * h * w;
                                for (std::ptrdiff_t ox = lo; ox <= hi; ++ox) {
                                    gxc[row_off + ox * s] += wv * grow[ox];
                                }
                            }
                            if (!gk.empty()) {
                                for (std::ptrdiff_t ox = lo; ox <= hi; ++ox) {
                                    wacc += grow[ox] * src[row_off + ox * s];
                                }
                            }
                        }
                        if (!gk.empty()) {
                            gk[c * ks * ks + ky * ks + kx] += wacc;
                        }
                    }
                }
            }
        });
}

Var pointwise_conv(Var x, Var weight, Var bias) {
    Tape& tape = tape_of(x);
    const Tensor& in = x.value();
    const Tensor& wt = weight.value();
    if (in.rank() != 3 || wt.rank() != 2) {
        throw ConfigError("pointwise_conv expects x [C_in,H,W] and weight [C_out,C_in], got " +
                          shape_to_string(in.shape()) + " and " + shape_to_string(wt.shape()));
    }
    if (wt.dim(1) != in.dim(0)) {
        throw ConfigError("pointwise_conv: weight expects " + std::to_string(wt.dim(1)) + " input channels, got " +
                          std::to_string(in.dim(0)));
    }
    const std::size_t cout = wt.dim(0), cin = in.dim(0), hw = in.dim(1) * in.dim(2);
    if (bias.valid() && bias.numel() != cout) {
        throw ConfigError("pointwise_conv: bias length " + std::to_string(bias.numel()) + " != " +
                          std::to_string(cout));
    }
    Tensor out({cout, in.dim(1), in.dim(2)});
    if (bias.valid()) {
        for (std::size_t o = 0; o < cout; ++o) {
            std::fill_n(out.data().begin() + o * hw, hw, bias.value()[o]);
        }
    }
    gemm(wt.data().data(), in.data().data(), out.data().data(), cout, cin, hw, false, false);
    record_macs(static_cast<std::uint64_t>(cout) * cin * hw);

    return tape.record(std::move(out), {x, weight, bias}, "pointwise_conv", [=](Tape& t, Var o) {
        const auto go = t.grad(o);
        if (auto gx = input_grad(t, x); !gx.empty()) {
            gemm(weight.value().data().data(), go.data(), gx.data(), cin, cout, hw, true, false);
        }
        if (auto gw = input_grad(t, weight); !gw.empty()) {
            gemm(go.data(), x.value().data().data(), gw.data(), cout, hw, cin, false, true);
        }
        if (auto gb = input_grad(t, bias); !gb.empty()) {
            for (std::size_t o2 = 0; o2 < cout; ++o2) {
                double acc = 0.0;
                for (std::size_t i = 0; i < hw; ++i) {
                    acc += go[o2 * hw + i];
                }
                gb[o2] += acc;
            }
        }
    });
}

Var space_to_depth(Var x, std::size_t block) {
    Tape& tape = tape_of(x);
    const Tensor& in = x.value();
    if (in.rank() != 3 || block == 0 || in.dim(1) % block != 0 || in.dim(2) % block != 0) {
        throw ConfigError("space_to_depth: shape " + shape_to_string(in.shape()) + " not divisible by block " +
                          std::to_string(block));
    }
    const std::size_t c = in.dim(0), h = in.dim(1), w = in.dim(2), oh = h / block, ow = w / block;
    Tensor out({c * block * block, oh, ow});
    auto index_map = [=](std::size_t ci, std::size_t dy, std::size_t dx, std::size_t oy, std::size_t ox) {
        const std::size_t oc = (ci * block + dy) * block + dx;
        return std::pair<std::size_t, std::size_t>{(oc * oh + oy) * ow + ox,
                                                   (ci * h + oy * block + dy) * w + ox * block + dx};
    };
    for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t dy = 0; dy < block; ++dy) {
            for (std::size_t dx = 0; dx < block; ++dx) {
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const auto [o, i] = index_map(ci, dy, dx, oy, ox);
                        out[o] = in[i];
                    }
                }
            }
        }
    }
    return tape.record(std::move(out), {x}, "space_to_depth", [=](Tape& t, Var o) {
        auto gx = input_grad(t, x);
        const auto go = t.grad(o);
        for (std::size_t ci = 0; ci < c; ++ci) {
            for (std::size_t dy = 0; dy < block; ++dy) {
                for (std::size_t dx = 0; dx < block; ++dx) {
                    for (std::size_t oy = 0; oy < oh; ++oy) {
                        for (std::size_t ox = 0; ox < ow; ++ox) {
                            const auto [oi, ii] = index_map(ci, dy, dx, oy, ox);
                            gx[ii] += go[oi];
                        }
                    }
                }
            }
        }
    });
}

Var global_avg_pool(Var x) {
    Tape& tape = tape_of(x);
    const Tensor& in = x.value();
    if (in.rank() != 3) {
        throw ConfigError("global_avg_pool expects [C,H,W], got " + shape_to_string(in.shape()));
    }
    const std::size_t c = in.dim(0), hw = in.dim(1) * in.dim(2);
    const double inv = 1.0 / static_cast<double>(hw);
    Tensor out({c});
    for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (std::size_t i = 0; i < hw; ++i) {
            acc += in[ch * hw + i];
        }
        out[ch] = acc * inv;
    }
    return tape.record(std::move(out), {x}, "global_avg_pool", [=](Tape& t, Var o) {
        auto gx = input_grad(t, x);
        const auto go = t.grad(o);
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double g = go[ch] * inv;
            for (std::size_t i = 0; i < hw; ++i) {
                gx[ch * hw + i] += g;
            }
        }
    });
}

namespace {

// Shared normalization kernel. Element (g, j) of group g, member j lives at
// offset g*group_stride + j*member_stride when viewed through `index`.
struct NormLayout {
    std::size_t groups;
    std::size_t members;
    std::size_t group_stride;
    std::size_t member_stride;
    std::size_t at(std::size_t g, std::size_t j) const { return g * group_stride + j * member_stride; }
};

Var normalize(Var x, Var gamma, Var beta, double eps, NormLayout layout, const char* name) {
    Tape& tape = tape_of(x);
    if (!(eps > 0.0)) {
        throw ConfigError(std::string(name) + ": eps must be positive");
    }
    if (gamma.numel() != layout.members || beta.numel() != layout.members) {
        throw ConfigError(std::string(name) + ": gamma/beta length must equal normalized extent " +
                          std::to_string(layout.members));
    }
    const Tensor& in = x.value();
    const Tensor& gm = gamma.value();
    const Tensor& bt = beta.value();
    Tensor out(in.shape());
    Tensor xhat(in.shape());
    std::vector<double> inv_std(layout.groups);
    const double inv_n = 1.0 / static_cast<double>(layout.members);
    for (std::size_t g = 0; g < layout.groups; ++g) {
        double mu = 0.0;
        for (std::size_t j = 0; j < layout.members; ++j) {
            mu += in[layout.at(g, j)];
        }
        mu *= inv_n;
        double var = 0.0;
        for (std::size_t j = 0; j < layout.members; ++j) {
            const double d = in[layout.at(g, j)] - mu;
            var += d * d;
        }
        var *= inv_n;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[g] = is;
        for (std::size_t j = 0; j < layout.members; ++j) {
            const std::size_t idx = layout.at(g, j);
            const double xh = (in[idx] - mu) * is;
            xhat[idx] = xh;
            out[idx] = gm[j] * xh + bt[j];
        }
    }
    return tape.record(
        std::move(out), {x, gamma, beta}, name,
        [x, gamma, beta, layout, inv_n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, Var o) {
            const auto go = t.grad(o);
            const Tensor& gm = gamma.value();
            auto gx = input_grad(t, x);
            auto gg = input_grad(t, gamma);
            auto gb = input_grad(t, beta);
            for (std::size_t g = 0; g < layout.groups; ++g) {
                double sum_d = 0.0, sum_dx = 0.0;
                for (std::size_t j = 0; j < layout.members; ++j) {
                    const std::size_t idx = layout.at(g, j);
                    const double d = go[idx] * gm[j];
                    sum_d += d;
                    sum_dx += d * xhat[idx];
                    if (!gg.empty()) {
                        gg[j] += go[idx] * xhat[idx];
                    }
                    if (!gb.empty()) {
                        gb[j] += go[idx];
                    }
                }
                if (!gx.empty()) {
                    const double md = sum_d * inv_n, mdx = sum_dx * inv_n;
                    for (std::size_t j = 0; j < layout.members; ++j) {
                        const std::size_t idx = layout.at(g, j);
                        gx[idx] += inv_std[g] * (go[idx] * gm[j] - md - xhat[idx] * mdx);
                    }
                }
            }
        });
}

}  // namespace

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    const Tensor& in = x.value();
    if (in.rank() < 1) {
        throw ConfigError("layer_norm on rank-0 tensor");
    }
    const std::size_t c = in.shape().back();
    if (gamma.numel() != c) {
        throw ConfigError("layer_norm: last axis has extent " + std::to_string(c) + " but gamma has " +
                          std::to_string(gamma.numel()));
    }
    return normalize(x, gamma, beta, eps, NormLayout{in.numel() / c, c, c, 1}, "layer_norm");
}

Var channel_norm(Var x, Var gamma, Var beta, double eps) {
    const Tensor& in = x.value();
    if (in.rank() < 1) {
        throw ConfigError("channel_norm on rank-0 tensor");
    }
    const std::size_t c = in.dim(0);
    if (gamma.numel() != c) {
        throw ConfigError("channel_norm: channel extent " + std::to_string(c) + " but gamma has " +
                          std::to_string(gamma.numel()));
    }
    const std::size_t positions = in.numel() / c;
    return normalize(x, gamma, beta, eps, NormLayout{positions, c, 1, positions}, "channel_norm");
}

Var matmul(Var a, Var b, bool transpose_a, bool transpose_b) {
    Tape& tape = tape_of(a);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    const bool batched = x.rank() == 3;
    if (x.rank() != y.rank() || (x.rank() != 2 && x.rank() != 3) || (batched && x.dim(0) != y.dim(0))) {
        throw ConfigError("matmul: unsupported operand shapes " + shape_to_string(x.shape()) + " and " +
                          shape_to_string(y.shape()));
    }
    const std::size_t batch = batched ? x.dim(0) : 1;
    const std::size_t off = batched ? 1 : 0;
    const std::size_t m = transpose_a ? x.dim(off + 1) : x.dim(off);
    const std::size_t k = transpose_a ? x.dim(off) : x.dim(off + 1);
    const std::size_t k2 = transpose_b ? y.dim(off + 1) : y.dim(off);
    const std::size_t n = transpose_b ? y.dim(off) : y.dim(off + 1);
    if (k != k2) {
        throw ConfigError("matmul: inner extents differ for " + shape_to_string(x.shape()) + " and " +
                          shape_to_string(y.shape()));
    }
    Tensor out(batched ? Shape{batch, m, n} : Shape{m, n});
    for (std::size_t bi = 0; bi < batch; ++bi) {
        gemm(x.data().data() + bi * m * k, y.data().data() + bi * k * n, out.data().data() + bi * m * n, m, k, n,
             transpose_a, transpose_b);
    }
    record_macs(static_cast<std::uint64_t>(batch) * m * k * n);

    return tape.record(std::move(out), {a, b}, "matmul", [=](Tape& t, Var o) {
        const auto go = t.grad(o);
        const double* xa = a.value().data().data();
        const double* yb = b.value().data().data();
        auto ga = input_grad(t, a);
        auto gb = input_grad(t, b);
        for (std::size_t bi = 0; bi < batch; ++bi) {
            const double* g = go.data() + bi * m * n;
            const double* ab = xa + bi * m * k;
            const double* bb = yb + bi * k * n;
            if (!ga.empty()) {
                double* da = ga.data() + bi * m * k;
                if (!transpose_a && !transpose_b) {
                    gemm(g, bb, da, m, n, k, false, true);
                } else if (transpose_a && !transpose_b) {
                    gemm(bb, g, da, k, n, m, false, true);
                } else if (!transpose_a && transpose_b) {
                    gemm(g, bb, da, m, n, k, false, false);
                } else {
                    gemm(bb, g, da, k, n, m, true, true);
                }
            }
            if (!gb.empty()) {
                double* db = gb.data() + bi * k * n;
                if (!transpose_a && !transpose_b) {
                    gemm(ab, g, db, k, m, n, true, false);
                } else if (transpose_a && !transpose_b) {
                    gemm(ab, g, db, k, m, n, false, false);
                } else if (!transpose_a && transpose_b) {
                    gemm(g, ab, db, n, m, k, true, false);
                } else {
                    gemm(g, ab, db, n, m, k, true, true);
                }
            }
        }
    });
}

Var linear(Var x, Var weight, Var bias) {
    const Tensor& in = x.value();
    const Tensor& w = weight.value();
    if (w.rank() != 2 || in.shape().back() != w.dim(1) || in.rank() > 2) {
        throw ConfigError("linear: input " + shape_to_string(in.shape()) + " incompatible with weight " +
                          shape_to_string(w.shape()));
    }
    const bool vector = in.rank() == 1;
    Var rows = vector ? reshape(x, {1, in.dim(0)}) : x;
    Var out = matmul(rows, weight, false, true);
    if (bias.valid()) {
        if (bias.numel() != w.dim(0)) {
            throw ConfigError("linear: bias length mismatch");
        }
        const std::size_t r = out.shape()[0];
        if (r == 1) {
            out = add(out, reshape(bias, {1, w.dim(0)}));
        } else {
            std::vector<Var> tiled(r, reshape(bias, {1, w.dim(0)}));
            out = add(out, concat_rows(tiled));
        }
    }
    return vector ? reshape(out, {w.dim(0)}) : out;
}

Var split_heads(Var x, std::size_t heads) {
    Tape& tape = tape_of(x);
    const Tensor& in = x.value();
    if (in.rank() != 2 || heads == 0 || in.dim(1) % heads != 0) {
        throw ConfigError("split_heads: width of " + shape_to_string(in.shape()) + " not divisible by " +
                          std::to_string(heads) + " heads");
    }
    const std::size_t len = in.dim(0), width = in.dim(1), d = width / heads;
    Tensor out({heads, len, d});
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t l = 0; l < len; ++l) {
            std::copy_n(in.data().begin() + l * width + h * d, d, out.data().begin() + (h * len + l) * d);
        }
    }
    return tape.record(std::move(out), {x}, "split_heads", [=](Tape& t, Var o) {
        auto gx = input_grad(t, x);
        const auto go = t.grad(o);
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t l = 0; l < len; ++l) {
                for (std::size_t j = 0; j < d; ++j) {
                    gx[l * width + h * d + j] += go[(h * len + l) * d + j];
                }
            }
        }
    });
}

Var merge_heads(Var x) {
    Tape& tape = tape_of(x);
    const Tensor& in = x.value();
    if (in.rank() != 3) {
        throw ConfigError("merge_heads expects [H,L,d], got " + shape_to_string(in.shape()));
    }
    const std::size_t heads = in.dim(0), len = in.dim(1), d = in.dim(2), width = heads * d;
    Tensor out({len, width});
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t l = 0; l < len; ++l) {
            std::copy_n(in.data().begin() + (h * len + l) * d, d, out.data().begin() + l * width + h * d);
        }
    }
    return tape.record(std::move(out), {x}, "merge_heads", [=](Tape& t, Var o) {
        auto gx = input_grad(t, x);
        const auto go = t.grad(o);
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t l = 0; l < len; ++l) {
                for (std::size_t j = 0; j < d; ++j) {
                    gx[(h * len + l) * d + j] += go[l * width + h * d + j];
                }
            }
        }
    });
}

Var frobenius_cap(Var x, double cap) {
    Tape& tape = tape_of(x);
    const Tensor& in = x.value();
    if (!(cap > 0.0) || in.rank() < 1) {
        throw ConfigError("frobenius_cap: cap must be positive");
    }
    const std::size_t slices = in.dim(0), per = in.numel() / slices;
    Tensor out(in.shape());
    std::vector<double> norms(slices);
    for (std::size_t s = 0; s < slices; ++s) {
        double sq = 0.0;
        for (std::size_t i = 0; i < per; ++i) {
            sq += in[s * per + i] * in[s * per + i];
        }
        const double nrm = std::sqrt(sq);
        norms[s] = nrm;
        const double f = nrm > cap ? cap / nrm : 1.0;
        for (std::size_t i = 0; i < per; ++i) {
            out[s * per + i] = in[s * per + i] * f;
        }
    }
    return tape.record(std::move(out), {x}, "frobenius_cap",
                       [x, cap, slices, per, norms = std::move(norms)](Tape& t, Var o) {
                           auto gx = input_grad(t, x);
                           const auto go = t.grad(o);
                           const Tensor& in = x.value();
                           for (std::size_t s = 0; s < slices; ++s) {
                               const double nrm = norms[s];
                               if (nrm <= cap) {
                                   for (std::size_t i = 0; i < per; ++i) {
                                       gx[s * per + i] += go[s * per + i];
                                   }
                                   continue;
                               }
                               double dot = 0.0;
                               for (std::size_t i = 0; i < per; ++i) {
                                   dot += in[s * per + i] * go[s * per + i];
                               }
                               const double f = cap / nrm;
                               const double r = dot / (nrm * nrm);
                               for (std::size_t i = 0; i < per; ++i) {
                                   gx[s * per + i] += f * (go[s * per + i] - in[s * per + i] * r);
                               }
                           }
                       });
}

Var cross_entropy(Var logits, std::size_t target, double smoothing) {
    Tape& tape = tape_of(logits);
    const Tensor& z = logits.value();
    if (z.rank() != 1) {
        throw ConfigError("cross_entropy expects logits [K], got " + shape_to_string(z.shape()));
    }
    const std::size_t k = z.numel();
    if (target >= k) {
        throw ConfigError("cross_entropy: target " + std::to_string(target) + " out of range for " +
                          std::to_string(k) + " classes");
    }
    if (smoothing < 0.0 || smoothing >= 1.0) {
        throw ConfigError("cross_entropy: smoothing must lie in [0, 1)");
    }
    const double zmax = *std::max_element(z.data().begin(), z.data().end());
    double denom = 0.0;
    for (double v : z.data()) {
        denom += std::exp(v - zmax);
    }
    const double log_denom = std::log(denom) + zmax;
    std::vector<double> probs(k);
    std::vector<double> q(k, smoothing / static_cast<double>(k));
    q[target] += 1.0 - smoothing;
    double loss = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const double logp = z[i] - log_denom;
        probs[i] = std::exp(logp);
        if (q[i] > 0.0) {
            loss -= q[i] * logp;
        }
    }
    return tape.record(Tensor::scalar(loss), {logits}, "cross_entropy",
                       [logits, probs = std::move(probs), q = std::move(q)](Tape& t, Var o) {
                           auto gz = input_grad(t, logits);
                           const double g = t.grad(o)[0];
                           for (std::size_t i = 0; i < gz.size(); ++i) {
                               gz[i] += g * (probs[i] - q[i]);
                           }
                       });
}

void require_finite(Var v, const std::string& what) {
    if (!v.value().all_finite()) {
        throw NumericalError("non-finite values in " + what);
    }
}

}  // namespace convneur
