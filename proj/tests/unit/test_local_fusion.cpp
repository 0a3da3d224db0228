#include "helpers.hpp"

#include "convneur/error.hpp"
#include "convneur/fusion.hpp"
#include "convneur/local_branch.hpp"
#include "convneur/ops.hpp"

#include <doctest.h>

#include <cmath>

using namespace convneur;
using convneur::test::random_tensor;

namespace {

Tensor local_out(const Tensor& x, LocalBranchParams& p, double eps = 1e-6) {
    Tape tape(false);
    return local_forward(tape.constant(x), bind(tape, p), eps).value();
}

LocalBranchParams random_local(std::size_t c, std::uint64_t seed) {
    Rng rng(seed);
    LocalBranchParams p = LocalBranchParams::init(c, LocalBranchConfig{}, rng, 0.3);
    p.norm_gamma = random_tensor({c}, rng, 0.5, 1.5);
    p.norm_beta = random_tensor({c}, rng, -0.2, 0.2);
    return p;
}

Tensor fuse_eval(const Tensor& x, const Tensor& f, const Tensor& g, FusionParams& params, const FusionConfig& cfg,
                 bool training = false, std::uint64_t seed = 0, double rate = 0.0) {
    Tape tape(false);
    return fuse(tape.constant(x), tape.constant(f), g.empty() ? Var{} : tape.constant(g), bind(tape, params), cfg,
                training, seed, rate)
        .value();
}

}  // namespace

TEST_SUITE("local_branch") {
    TEST_CASE("identity composition reproduces the input") {
        // The neutralized norm divides by the channel std; choose inputs whose
        // per-position mean is 0 and variance is 1 so the norm is the identity.
        Tensor x({2, 3, 3});
        for (std::size_t p = 0; p < 9; ++p) {
            const double s = p % 2 ? 1.0 : -1.0;
            x[p] = s;
            x[9 + p] = -s;
        }
        LocalBranchParams p = LocalBranchParams::identity(2, LocalBranchConfig{});
        const Tensor y = local_out(x, p, 1e-14);
        CHECK(max_abs_diff(y, x) < 1e-9);
    }

    TEST_CASE("output shape equals input shape") {
        LocalBranchParams p = random_local(5, 1);
        CHECK(local_out(random_tensor({5, 9, 7}, 2), p).shape() == Shape{5, 9, 7});
    }

    TEST_CASE("channel mismatch is a configuration error") {
        LocalBranchParams p = random_local(4, 3);
        CHECK_THROWS_AS(local_out(random_tensor({5, 8, 8}, 4), p), ConfigError);
    }

    TEST_CASE("receptive field: identical patch gives identical center") {
        LocalBranchParams p = random_local(3, 5);
        const Tensor a = random_tensor({3, 20, 20}, 6);
        Tensor b = random_tensor({3, 20, 20}, 7);
        // Copy a 14x14 window centered at (10, 10) from a into b.
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t y = 3; y < 17; ++y) {
                for (std::size_t x = 3; x < 17; ++x) {
                    b.at(c, y, x) = a.at(c, y, x);
                }
            }
        }
        const Tensor ya = local_out(a, p), yb = local_out(b, p);
        for (std::size_t c = 0; c < 3; ++c) {
            CHECK(ya.at(c, 10, 10) == yb.at(c, 10, 10));
        }
    }

    TEST_CASE("perturbing a far pixel leaves F_loc unchanged") {
        LocalBranchParams p = random_local(3, 8);
        const Tensor a = random_tensor({3, 16, 16}, 9);
        const Tensor ya = local_out(a, p);
        for (std::size_t seed = 0; seed < 20; ++seed) {
            Rng rng(seed);
            const std::size_t py = rng.below(16), px = rng.below(16);
            Tensor b = a;
            b.at(rng.below(3), py, px) += 1.0;
            const Tensor yb = local_out(b, p);
            for (std::size_t y = 0; y < 16; ++y) {
                for (std::size_t x = 0; x < 16; ++x) {
                    const std::size_t dy = y > py ? y - py : py - y, dx = x > px ? x - px : px - x;
                    if (std::max(dy, dx) > 3) {
                        for (std::size_t c = 0; c < 3; ++c) {
                            CHECK(ya.at(c, y, x) == yb.at(c, y, x));
                        }
                    }
                }
            }
        }
    }

    TEST_CASE("shift equivariance in the interior") {
        LocalBranchParams p = random_local(3, 10);
        const Tensor big = random_tensor({3, 24, 24}, 11);
        auto crop = [&](std::size_t oy, std::size_t ox) {
            Tensor t({3, 18, 18});
            for (std::size_t c = 0; c < 3; ++c) {
                for (std::size_t y = 0; y < 18; ++y) {
                    for (std::size_t x = 0; x < 18; ++x) {
                        t.at(c, y, x) = big.at(c, y + oy, x + ox);
                    }
                }
            }
            return t;
        };
        const Tensor y0 = local_out(crop(0, 0), p), y1 = local_out(crop(2, 3), p);
        double dev = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t y = 3; y + 3 < 18 - 2; ++y) {
                for (std::size_t x = 3; x + 3 < 18 - 3; ++x) {
                    dev = std::max(dev, std::abs(y1.at(c, y, x) - y0.at(c, y + 2, x + 3)));
                }
            }
        }
        CHECK(dev < 1e-9);
    }

    TEST_CASE("config validation") {
        LocalBranchConfig cfg;
        cfg.kernel = 6;
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
        cfg.kernel = 7;
        cfg.expansion = 0;
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
    }
}

TEST_SUITE("gate") {
    TEST_CASE("g = 0 and bias = 0 give one half") {
        Tape tape;
        const Tensor a = gate(tape.constant(Tensor({2, 3, 3})), tape.constant(Tensor({2}))).value();
        for (double v : a.data()) {
            CHECK(v == 0.5);
        }
    }

    TEST_CASE("g = -50 closes the gate below 2e-22") {
        Tape tape;
        const Tensor a = gate(tape.constant(Tensor({2, 2, 2}, -50.0)), tape.constant(Tensor({2}))).value();
        for (double v : a.data()) {
            CHECK(v < 2e-22);
            CHECK(v > 0.0);
        }
    }

    TEST_CASE("monotone in g") {
        const Tensor g2 = random_tensor({3, 4, 4}, 1, -5, 5);
        Tensor g1 = g2;
        Rng rng(2);
        for (double& v : g1.data()) {
            v += rng.uniform(0.0, 3.0);
        }
        const Tensor bias = random_tensor({3}, 3);
        Tape tape;
        const Tensor a1 = gate(tape.constant(g1), tape.constant(bias)).value();
        const Tensor a2 = gate(tape.constant(g2), tape.constant(bias)).value();
        for (std::size_t i = 0; i < a1.numel(); ++i) {
            CHECK(a1[i] >= a2[i]);
        }
    }

    TEST_CASE("channel-shared gate is constant over channels") {
        Tape tape;
        const Tensor a = gate(tape.constant(random_tensor({4, 3, 3}, 4)), tape.constant(Tensor({4})), true).value();
        for (std::size_t p = 0; p < 9; ++p) {
            for (std::size_t c = 1; c < 4; ++c) {
                CHECK(a[c * 9 + p] == a[p]);
            }
        }
    }
}

TEST_SUITE("drop_path") {
    TEST_CASE("rate 0 and eval mode are the identity") {
        const Tensor x = random_tensor({2, 3, 3}, 1);
        Tape tape;
        CHECK(bit_equal(drop_path(tape.constant(x), 0.0, true, 5).value(), x));
        CHECK(bit_equal(drop_path(tape.constant(x), 0.0, false, 5).value(), x));
        CHECK(bit_equal(drop_path(tape.constant(x), 0.7, false, 5).value(), x));
    }

    TEST_CASE("Monte Carlo: rate 0.5 over 10k samples") {
        Tensor x({10000, 1}, 1.0);
        Tape tape;
        const Tensor y = drop_path_batch(tape.constant(x), 0.5, true, 42).value();
        std::size_t kept = 0;
        double mean = 0.0;
        for (double v : y.data()) {
            kept += v != 0.0 ? 1 : 0;
            mean += v / 10000.0;
            CHECK((v == 0.0 || v == 2.0));
        }
        CHECK(std::abs(static_cast<double>(kept) / 10000.0 - 0.5) < 0.02);
        CHECK(std::abs(mean - 1.0) < 0.02);
    }

    TEST_CASE("deterministic given the seed") {
        const Tensor x = random_tensor({64, 2}, 2);
        Tape tape;
        CHECK(bit_equal(drop_path_batch(tape.constant(x), 0.3, true, 9).value(),
                        drop_path_batch(tape.constant(x), 0.3, true, 9).value()));
    }

    TEST_CASE("rate outside [0, 1) is rejected") {
        FusionConfig cfg;
        cfg.drop_path_rate = 1.0;
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
        cfg.drop_path_rate = -0.1;
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
    }
}

TEST_SUITE("fuse") {
    TEST_CASE("hand case: x=1, f=2, g=0 gives 2") {
        Rng rng(0);
        FusionParams p = FusionParams::init(1, FusionMode::gating, rng);
        const Tensor y = fuse_eval(Tensor({1, 1, 1}, 1.0), Tensor({1, 1, 1}, 2.0), Tensor({1, 1, 1}), p, FusionConfig{});
        CHECK(y.item() == 2.0);
    }

    TEST_CASE("closed gate returns x within 1e-12") {
        Rng rng(1);
        FusionParams p = FusionParams::init(4, FusionMode::gating, rng);
        const Tensor x = random_tensor({4, 5, 5}, 2), f = random_tensor({4, 5, 5}, 3, -10, 10);
        const Tensor y = fuse_eval(x, f, Tensor({4, 5, 5}, -50.0), p, FusionConfig{});
        CHECK(max_abs_diff(y, x) < 1e-12);
    }

    TEST_CASE("zero local features: gating gives x, addition gives x + g") {
        const Tensor x = random_tensor({3, 2, 2}, 4), g = random_tensor({3, 2, 2}, 5);
        const Tensor zero({3, 2, 2});
        Rng rng(6);
        FusionParams gp = FusionParams::init(3, FusionMode::gating, rng);
        CHECK(bit_equal(fuse_eval(x, zero, g, gp, FusionConfig{}), x));
        FusionConfig add_cfg;
        add_cfg.mode = FusionMode::addition;
        FusionParams ap = FusionParams::init(3, FusionMode::addition, rng);
        const Tensor y = fuse_eval(x, zero, g, ap, add_cfg);
        for (std::size_t i = 0; i < y.numel(); ++i) {
            CHECK(y[i] == x[i] + g[i]);
        }
    }

    TEST_CASE("residual bound: |out - x| <= |f|_inf * max gate") {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            Rng rng(seed);
            FusionParams p = FusionParams::init(3, FusionMode::gating, rng);
            p.gate_bias = random_tensor({3}, rng);
            const Tensor x = random_tensor({3, 4, 4}, rng), f = random_tensor({3, 4, 4}, rng, -3, 3),
                         g = random_tensor({3, 4, 4}, rng, -4, 4);
            Tape tape;
            const Tensor a = gate(tape.constant(g), tape.constant(p.gate_bias)).value();
            const Tensor y = fuse_eval(x, f, g, p, FusionConfig{});
            CHECK(max_abs_diff(y, x) <= max_abs(f) * max_abs(a) + 1e-15);
        }
    }

    TEST_CASE("concatenation with [I | 0] is the gate-free residual") {
        FusionConfig cfg;
        cfg.mode = FusionMode::concatenation;
        Rng rng(7);
        FusionParams p = FusionParams::init(3, FusionMode::concatenation, rng);
        REQUIRE(p.concat_reduce.has_value());
        for (std::size_t o = 0; o < 3; ++o) {
            for (std::size_t i = 0; i < 3; ++i) {
                CHECK(p.concat_reduce->at(o, i) == (o == i ? 1.0 : 0.0));
                p.concat_reduce->at(o, 3 + i) = 0.0;
            }
        }
        const Tensor x = random_tensor({3, 3, 3}, 8), f = random_tensor({3, 3, 3}, 9), g = random_tensor({3, 3, 3}, 10);
        const Tensor y = fuse_eval(x, f, g, p, cfg);
        for (std::size_t i = 0; i < y.numel(); ++i) {
            CHECK(y[i] == x[i] + f[i]);
        }
    }

    TEST_CASE("concatenation without a reduce is a configuration error") {
        FusionConfig cfg;
        cfg.mode = FusionMode::concatenation;
        Rng rng(11);
        FusionParams p = FusionParams::init(2, FusionMode::gating, rng);
        CHECK_THROWS_AS(fuse_eval(Tensor({2, 1, 1}), Tensor({2, 1, 1}), Tensor({2, 1, 1}), p, cfg), ConfigError);
    }

    TEST_CASE("missing global map reduces to x + f") {
        Rng rng(12);
        FusionParams p = FusionParams::init(2, FusionMode::gating, rng);
        const Tensor x = random_tensor({2, 2, 2}, 13), f = random_tensor({2, 2, 2}, 14);
        const Tensor y = fuse_eval(x, f, Tensor{}, p, FusionConfig{});
        for (std::size_t i = 0; i < y.numel(); ++i) {
            CHECK(y[i] == x[i] + f[i]);
        }
    }

    TEST_CASE("eval is bit-deterministic") {
        Rng rng(15);
        FusionParams p = FusionParams::init(3, FusionMode::gating, rng);
        const Tensor x = random_tensor({3, 4, 4}, 16), f = random_tensor({3, 4, 4}, 17), g = random_tensor({3, 4, 4}, 18);
        CHECK(bit_equal(fuse_eval(x, f, g, p, FusionConfig{}), fuse_eval(x, f, g, p, FusionConfig{})));
    }

    TEST_CASE("mode names round-trip") {
        for (FusionMode m : {FusionMode::gating, FusionMode::addition, FusionMode::concatenation}) {
            CHECK(parse_fusion_mode(fusion_mode_name(m)) == m);
        }
        CHECK(parse_fusion_mode("concat") == FusionMode::concatenation);
        CHECK_THROWS_AS(parse_fusion_mode("multiply"), ConfigError);
    }
}
