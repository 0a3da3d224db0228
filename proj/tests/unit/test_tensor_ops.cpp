#include "helpers.hpp"

#include "convneur/error.hpp"
#include "convneur/grad_check.hpp"
#include "convneur/ops.hpp"
#include "convneur/reference.hpp"
#include "convneur/tape.hpp"

#include <doctest.h>

#include <cmath>

using namespace convneur;
using convneur::test::random_tensor;

TEST_SUITE("tensor") {
    TEST_CASE("shape bookkeeping") {
        Tensor t({2, 3, 4});
        CHECK(t.numel() == 24);
        CHECK(t.rank() == 3);
        CHECK(t.at(1, 2, 3) == 0.0);
        t.at(1, 2, 3) = 5.0;
        CHECK(t[23] == 5.0);
        CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ConfigError);
        CHECK_THROWS_AS(t.reshaped({5, 5}), ConfigError);
        CHECK_FALSE(t.has_grad());
        t.grad()[0] = 1.0;
        CHECK(t.has_grad());
        CHECK(t.grad().size() == t.numel());
    }
}

TEST_SUITE("depthwise_conv2d") {
    TEST_CASE("ones kernel on ones input: center 9, corners 4") {
        Tape tape;
        const Var x = tape.constant(Tensor({1, 3, 3}, 1.0));
        const Var k = tape.constant(Tensor({1, 3, 3}, 1.0));
        const Tensor y = depthwise_conv2d(x, k, 1, 1).value();
        // Oracle: brute-force loop.
        const Tensor ref = reference::depthwise_conv2d(Tensor({1, 3, 3}, 1.0), Tensor({1, 3, 3}, 1.0), 1, 1);
        CHECK(ref.at(0, 1, 1) == 9.0);
        CHECK(ref.at(0, 0, 0) == 4.0);
        CHECK(bit_equal(y, ref));
    }

    TEST_CASE("ramp input, 2x2 ones kernel, stride 2") {
        Tensor ramp({1, 4, 4});
        for (std::size_t i = 0; i < 16; ++i) {
            ramp[i] = static_cast<double>(i);
        }
        const Tensor ref = reference::depthwise_conv2d(ramp, Tensor({1, 2, 2}, 1.0), 2, 0);
        REQUIRE(ref.shape() == Shape{1, 2, 2});
        CHECK(ref.values() == std::vector<double>{10, 18, 42, 50});
        Tape tape;
        const Tensor y = depthwise_conv2d(tape.constant(ramp), tape.constant(Tensor({1, 2, 2}, 1.0)), 2, 0).value();
        CHECK(bit_equal(y, ref));
    }

    TEST_CASE("delta kernel is the identity, bit for bit") {
        const Tensor x = random_tensor({3, 6, 5}, 11);
        Tensor delta({3, 7, 7});
        for (std::size_t c = 0; c < 3; ++c) {
            delta.at(c, 3, 3) = 1.0;
        }
        Tape tape;
        CHECK(bit_equal(depthwise_conv2d(tape.constant(x), tape.constant(delta), 1, 3).value(), x));
    }

    TEST_CASE("random cases match the loop oracle") {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            const Tensor x = random_tensor({2, 7, 7}, seed);
            const Tensor k = random_tensor({2, 3, 3}, seed + 100);
            Tape tape;
            const Tensor y = depthwise_conv2d(tape.constant(x), tape.constant(k), 2, 1).value();
            CHECK(max_abs_diff(y, reference::depthwise_conv2d(x, k, 2, 1)) < 1e-12);
        }
    }

    TEST_CASE("shape errors") {
        Tape tape;
        const Var x = tape.constant(Tensor({2, 4, 4}));
        CHECK_THROWS_AS(depthwise_conv2d(x, tape.constant(Tensor({3, 3, 3})), 1, 1), ConfigError);
        CHECK_THROWS_AS(depthwise_conv2d(x, tape.constant(Tensor({2, 3, 3})), 2, 0), ConfigError);
    }
}

TEST_SUITE("pointwise_conv") {
    TEST_CASE("identity weight is the identity map") {
        const Tensor x = random_tensor({4, 3, 3}, 3);
        Tensor eye({4, 4});
        for (std::size_t i = 0; i < 4; ++i) {
            eye.at(i, i) = 1.0;
        }
        Tape tape;
        CHECK(bit_equal(pointwise_conv(tape.constant(x), tape.constant(eye)).value(), x));
        CHECK(bit_equal(pointwise_conv(tape.constant(x), tape.constant(eye), tape.constant(Tensor({4}))).value(), x));
    }

    TEST_CASE("[[1,1]] sums the two channels") {
        const Tensor x = random_tensor({2, 2, 3}, 4);
        Tape tape;
        const Tensor y = pointwise_conv(tape.constant(x), tape.constant(Tensor::from({1, 2}, {1, 1}))).value();
        for (std::size_t p = 0; p < 6; ++p) {
            CHECK(y[p] == x[p] + x[6 + p]);
        }
    }

    TEST_CASE("random 3->2 projection matches a matvec") {
        const Tensor x = random_tensor({3, 1, 1}, 5);
        const Tensor w = random_tensor({2, 3}, 6);
        Tape tape;
        const Tensor y = pointwise_conv(tape.constant(x), tape.constant(w)).value();
        for (std::size_t o = 0; o < 2; ++o) {
            const double expect = w.at(o, 0) * x[0] + w.at(o, 1) * x[1] + w.at(o, 2) * x[2];
            CHECK(std::abs(y[o] - expect) < 1e-15);
        }
        CHECK(max_abs_diff(y, reference::pointwise_conv(x, w)) < 1e-15);
    }

    TEST_CASE("extent mismatch") {
        Tape tape;
        CHECK_THROWS_AS(pointwise_conv(tape.constant(Tensor({3, 2, 2})), tape.constant(Tensor({2, 4}))), ConfigError);
    }
}

TEST_SUITE("layer_norm") {
    TEST_CASE("constant channel vector normalizes to zeros") {
        Tape tape;
        const Tensor y = channel_norm(tape.constant(Tensor({4, 2, 2}, 3.0)), tape.constant(Tensor({4}, 1.0)),
                                      tape.constant(Tensor({4})), 1e-6)
                             .value();
        CHECK(max_abs(y) == 0.0);
    }

    TEST_CASE("[1,-1] stays [1,-1] as eps goes to zero") {
        Tape tape;
        const Tensor y = layer_norm(tape.constant(Tensor::from({2}, {1, -1})), tape.constant(Tensor({2}, 1.0)),
                                    tape.constant(Tensor({2})), 1e-12)
                             .value();
        // mean 0, variance 1: (x - 0) / sqrt(1 + eps)
        CHECK(std::abs(y[0] - 1.0) < 1e-11);
        CHECK(std::abs(y[1] + 1.0) < 1e-11);
    }

    TEST_CASE("gamma 0, beta 5 collapses to 5") {
        Tape tape;
        const Tensor y = layer_norm(tape.constant(random_tensor({3, 4}, 8)), tape.constant(Tensor({4})),
                                    tape.constant(Tensor({4}, 5.0)), 1e-6)
                             .value();
        for (double v : y.data()) {
            CHECK(v == 5.0);
        }
    }

    TEST_CASE("per-position moments before the affine") {
        Tape tape;
        const Tensor y = channel_norm(tape.constant(random_tensor({6, 3, 3}, 9)), tape.constant(Tensor({6}, 1.0)),
                                      tape.constant(Tensor({6})), 1e-9)
                             .value();
        for (std::size_t p = 0; p < 9; ++p) {
            double mean = 0.0, var = 0.0;
            for (std::size_t c = 0; c < 6; ++c) {
                mean += y[c * 9 + p] / 6.0;
            }
            for (std::size_t c = 0; c < 6; ++c) {
                var += (y[c * 9 + p] - mean) * (y[c * 9 + p] - mean) / 6.0;
            }
            CHECK(std::abs(mean) < 1e-12);
            CHECK(std::abs(var - 1.0) < 1e-6);
        }
    }
}

TEST_SUITE("elementwise") {
    TEST_CASE("closed forms") {
        Tape tape;
        CHECK(sigmoid(tape.constant(Tensor::scalar(0.0))).item() == 0.5);
        CHECK(std::abs(softplus(tape.constant(Tensor::scalar(0.0))).item() - std::log(2.0)) < 1e-15);
        CHECK(std::abs(softplus(tape.constant(Tensor::scalar(0.0))).item() - 0.693147) < 1e-6);
        const Tensor x = random_tensor({5}, 1);
        CHECK(max_abs(mul(tape.constant(x), tape.constant(Tensor::scalar(0.0))).value()) == 0.0);
        CHECK(max_abs(mul(tape.constant(x), tape.constant(Tensor({5}))).value()) == 0.0);
    }

    TEST_CASE("sigmoid stays strictly inside (0, 1)") {
        Tape tape;
        const Tensor y = sigmoid(tape.constant(Tensor::from({4}, {-50, -10, 10, 30}))).value();
        for (double v : y.data()) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
        }
    }

    TEST_CASE("gelu uses the tanh approximation") {
        Tape tape;
        const double x = 0.7;
        const double expect = 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
        CHECK(std::abs(gelu(tape.constant(Tensor::scalar(x))).item() - expect) < 1e-15);
    }

    TEST_CASE("only scalar and identical-shape broadcasting") {
        Tape tape;
        CHECK_NOTHROW(add(tape.constant(Tensor({2, 3})), tape.constant(Tensor::scalar(1.0))));
        CHECK_THROWS_AS(add(tape.constant(Tensor({2, 3})), tape.constant(Tensor({3}))), ConfigError);
        CHECK_THROWS_AS(mul(tape.constant(Tensor({2, 3})), tape.constant(Tensor({3, 2}))), ConfigError);
    }
}

TEST_SUITE("backward") {
    TEST_CASE("sum gives ones") {
        Tensor x = random_tensor({3, 2}, 2);
        Tape tape;
        tape.backward(sum(tape.parameter(x)));
        for (double g : x.grad()) {
            CHECK(g == 1.0);
        }
    }

    TEST_CASE("sum of squares gives 2x") {
        Tensor x = random_tensor({4}, 3);
        Tape tape;
        const Var v = tape.parameter(x);
        tape.backward(sum(v * v));
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(x.grad()[i] == 2.0 * x[i]);
        }
    }

    TEST_CASE("fan-out accumulates the per-path gradients") {
        Tensor x = random_tensor({3}, 4);
        Tensor w = random_tensor({3}, 5);
        // Two paths: sum(x * w) and sum(sigmoid(x)); computed separately then together.
        auto path_grad = [&](int which) {
            Tensor copy = x;
            Tape tape;
            const Var v = tape.parameter(copy);
            Var loss;
            if (which == 0) {
                loss = sum(v * tape.constant(w));
            } else if (which == 1) {
                loss = sum(sigmoid(v));
            } else {
                loss = sum(v * tape.constant(w)) + sum(sigmoid(v));
            }
            tape.backward(loss);
            return std::vector<double>(copy.grad().begin(), copy.grad().end());
        };
        const auto a = path_grad(0), b = path_grad(1), both = path_grad(2);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(std::abs(both[i] - (a[i] + b[i])) < 1e-15);
        }
    }

    TEST_CASE("non-scalar loss is a usage error") {
        Tensor x = random_tensor({3}, 6);
        Tape tape;
        CHECK_THROWS_AS(tape.backward(tape.parameter(x)), UsageError);
    }
}

TEST_SUITE("grad_check") {
    TEST_CASE("linear function is exact") {
        Tensor w = random_tensor({4}, 7);
        const Tensor c = random_tensor({4}, 8);
        const std::vector<NamedTensor> params{{"w", &w}};
        const auto r = grad_check([&](Tape& t) { return sum(t.parameter(w) * t.constant(c)); }, params, 1e-5);
        CHECK(r.max_rel_error < 1e-10);
    }

    TEST_CASE("broken backward rule is caught") {
        Tensor a = random_tensor({2, 3}, 9);
        Tensor b = random_tensor({3, 2}, 10);
        const std::vector<NamedTensor> params{{"a", &a}, {"b", &b}};
        auto f = [&](Tape& t) { return sum(sigmoid(matmul(t.parameter(a), t.parameter(b)))); };
        CHECK(grad_check(f, params, 1e-5).max_rel_error < 1e-8);
        FaultInjection fault("matmul");
        CHECK(grad_check(f, params, 1e-5).max_rel_error > 1e-2);
    }

    TEST_CASE("eps outside [1e-7, 1e-3] is rejected") {
        Tensor w({1}, 1.0);
        const std::vector<NamedTensor> params{{"w", &w}};
        auto f = [&](Tape& t) { return sum(t.parameter(w)); };
        CHECK_THROWS(grad_check(f, params, 1e-2));
        CHECK_THROWS(grad_check(f, params, 1e-9));
    }

    TEST_CASE("non-finite probe names the parameter") {
        Tensor w({1}, 0.0);
        const std::vector<NamedTensor> params{{"the_weight", &w}};
        // log-like blow-up: 1 / x at x = 0 via softplus of a huge scaled input
        auto f = [&](Tape& t) { return sum(scale(t.parameter(w), 1e308) * t.constant(Tensor::scalar(1e308))); };
        try {
            grad_check(f, params, 1e-5);
            FAIL("expected a NumericalError");
        } catch (const NumericalError& e) {
            CHECK(std::string(e.what()).find("the_weight") != std::string::npos);
        }
    }
}
