#include "helpers.hpp"

#include "convneur/dataset.hpp"
#include "convneur/error.hpp"
#include "convneur/ops.hpp"
#include "convneur/optim.hpp"
#include "convneur/train.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>

using namespace convneur;
using convneur::test::random_tensor;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("convneur_test_" + name);
}

void put_u32(std::ofstream& out, std::uint32_t v) {
    const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                           static_cast<char>(v)};
    out.write(bytes, 4);
}

void write_idx_images(const std::filesystem::path& p, std::uint32_t n, std::uint32_t rows, std::uint32_t cols,
                      const std::vector<unsigned char>& pixels, std::uint32_t magic = 0x803) {
    std::ofstream out(p, std::ios::binary);
    put_u32(out, magic);
    put_u32(out, n);
    put_u32(out, rows);
    put_u32(out, cols);
    out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

void write_idx_labels(const std::filesystem::path& p, const std::vector<unsigned char>& labels,
                      std::uint32_t magic = 0x801) {
    std::ofstream out(p, std::ios::binary);
    put_u32(out, magic);
    put_u32(out, static_cast<std::uint32_t>(labels.size()));
    out.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

DataErrorCode data_error(const std::function<void()>& f) {
    try {
        f();
    } catch (const DataError& e) {
        return e.code();
    }
    FAIL("expected a DataError");
    return DataErrorCode::empty;
}

class ConstantClassifier final : public Classifier {
public:
    ConstantClassifier(std::size_t classes, std::size_t winner) : classes_(classes), winner_(winner) {}
    Tensor logits(const Tensor&) override {
        Tensor t({classes_});
        if (winner_ < classes_) {
            t[winner_] = 1.0;
        }
        return t;
    }

private:
    std::size_t classes_, winner_;
};

Dataset tiny_synth(std::size_t n, std::uint64_t seed) { return synth_global_task(n, 32, 4, seed); }

ModelConfig micro4() {
    ModelConfig c = ModelConfig::preset("micro");
    c.num_classes = 4;
    return c;
}

}  // namespace

TEST_SUITE("load_idx") {
    TEST_CASE("reads pixels and labels") {
        const auto img = temp_file("img.idx"), lab = temp_file("lab.idx");
        write_idx_images(img, 2, 2, 3, {0, 255, 51, 0, 0, 0, 1, 2, 3, 4, 5, 6});
        write_idx_labels(lab, {3, 1});
        const Dataset d = load_idx(img, lab);
        CHECK(d.size() == 2);
        CHECK(d.num_classes == 4);
        CHECK(d.images.shape() == Shape{2, 1, 2, 3});
        CHECK(d.images[1] == 1.0);
        CHECK(d.images[2] == 51.0 / 255.0);
        CHECK(d.labels == std::vector<std::size_t>{3, 1});
    }

    TEST_CASE("all-zero pixels load cleanly") {
        const auto img = temp_file("zero.idx"), lab = temp_file("zlab.idx");
        write_idx_images(img, 5, 28, 28, std::vector<unsigned char>(5 * 28 * 28, 0));
        write_idx_labels(lab, {0, 1, 2, 3, 4});
        const Dataset d = load_idx(img, lab);
        CHECK(max_abs(d.images) == 0.0);
        CHECK(d.images.shape() == Shape{5, 1, 28, 28});
    }

    TEST_CASE("canonical header: 60000 images of 28x28") {
        // Header only; the payload check then reports exactly what is missing.
        const auto img = temp_file("big.idx"), lab = temp_file("biglab.idx");
        write_idx_images(img, 60000, 28, 28, {});
        write_idx_labels(lab, std::vector<unsigned char>(60000, 0));
        std::string msg;
        try {
            load_idx(img, lab);
        } catch (const DataError& e) {
            msg = e.what();
            CHECK(e.code() == DataErrorCode::truncated);
        }
        CHECK(msg.find("60000") != std::string::npos);
        CHECK(msg.find("28") != std::string::npos);
    }

    TEST_CASE("distinct errors") {
        const auto img = temp_file("e_img.idx"), lab = temp_file("e_lab.idx");
        write_idx_images(img, 2, 2, 2, std::vector<unsigned char>(8, 1));
        write_idx_labels(lab, {0, 1, 1});
        CHECK(data_error([&] { load_idx(img, lab); }) == DataErrorCode::count_mismatch);
        write_idx_labels(lab, {0, 1}, 0x802);
        CHECK(data_error([&] { load_idx(img, lab); }) == DataErrorCode::wrong_magic);
        write_idx_labels(lab, {0, 1});
        write_idx_images(img, 2, 2, 2, std::vector<unsigned char>(7, 1));
        CHECK(data_error([&] { load_idx(img, lab); }) == DataErrorCode::truncated);
        CHECK(data_error([&] { load_idx(temp_file("nope.idx"), lab); }) == DataErrorCode::missing_file);
    }

    TEST_CASE("channel adaptation pads to a multiple of 32") {
        const auto img = temp_file("a_img.idx"), lab = temp_file("a_lab.idx");
        write_idx_images(img, 1, 28, 28, std::vector<unsigned char>(784, 255));
        write_idx_labels(lab, {0});
        const Dataset d = adapt_channels(load_idx(img, lab));
        CHECK(d.images.shape() == Shape{1, 3, 32, 32});
        const Tensor im = d.image(0);
        CHECK(im.at(0, 0, 0) == 0.0);
        CHECK(im.at(2, 2, 2) == 1.0);
        CHECK(im.at(1, 29, 29) == 1.0);
        CHECK(im.at(1, 30, 30) == 0.0);
    }
}

TEST_SUITE("synth_global_task") {
    TEST_CASE("deterministic given the seed") {
        const Dataset a = tiny_synth(20, 5), b = tiny_synth(20, 5), c = tiny_synth(20, 6);
        CHECK(bit_equal(a.images, b.images));
        CHECK(a.labels == b.labels);
        CHECK_FALSE(bit_equal(a.images, c.images));
    }

    TEST_CASE("balanced labels, values in [0, 1], two bright markers far apart") {
        const Dataset d = tiny_synth(40, 7);
        d.validate();
        for (std::size_t i = 0; i < d.size(); ++i) {
            CHECK(d.labels[i] == i % 4);
            const Tensor im = d.image(i);
            std::vector<std::pair<std::size_t, std::size_t>> bright;
            for (std::size_t y = 0; y < 32; ++y) {
                for (std::size_t x = 0; x < 32; ++x) {
                    if (im.at(0, y, x) >= 0.8) {
                        bright.emplace_back(y, x);
                    }
                }
            }
            REQUIRE(bright.size() == 18);
            // Centers: the marker pixels split into two 3x3 groups.
            double ay = 0, ax = 0, by = 0, bx = 0;
            const auto first = bright.front();
            std::size_t na = 0, nb = 0;
            for (const auto& [y, x] : bright) {
                const bool same = std::max(y > first.first ? y - first.first : first.first - y,
                                           x > first.second ? x - first.second : first.second - x) <= 4;
                (same ? ay : by) += static_cast<double>(y);
                (same ? ax : bx) += static_cast<double>(x);
                ++(same ? na : nb);
            }
            REQUIRE(na == 9);
            REQUIRE(nb == 9);
            const double dy = by / 9 - ay / 9, dx = bx / 9 - ax / 9;
            CHECK(std::hypot(dy, dx) >= 16.0);
            CHECK(orientation_class(dy, dx, 4) == d.labels[i]);
        }
    }

    TEST_CASE("orientation binning") {
        CHECK(orientation_class(0, 10, 4) == 0);    // horizontal
        CHECK(orientation_class(-10, 0, 4) == 2);   // vertical
        CHECK(orientation_class(10, 0, 4) == 2);    // undirected
        CHECK(orientation_class(-10, 10, 4) == 1);  // 45 degrees, up-right
        CHECK(orientation_class(10, 10, 4) == 3);   // 135 degrees
        CHECK(orientation_class(0, -10, 4) == 0);
        CHECK(orientation_class(0, 10, 4) != orientation_class(10, 0, 4));
    }

    TEST_CASE("n = 0 gives an empty dataset that training rejects") {
        const Dataset empty = tiny_synth(0, 1);
        CHECK(empty.empty());
        Model m = Model::build(micro4(), 0);
        TrainConfig cfg;
        cfg.steps = 1;
        CHECK_THROWS_AS(train(m, empty, nullptr, cfg), DataError);
        CHECK_THROWS_AS(evaluate(m, empty), UsageError);
    }
}

TEST_SUITE("optimizer") {
    TEST_CASE("schedule: linear warm-up then cosine to zero") {
        const LrSchedule s = LrSchedule::with_warmup_fraction(1.0, 100, 0.05);
        CHECK(s.warmup_steps == 5);
        CHECK(s.at(0) == doctest::Approx(0.2));
        CHECK(s.at(4) == doctest::Approx(1.0));
        CHECK(s.at(5) == doctest::Approx(1.0));
        CHECK(s.at(52) == doctest::Approx(0.5 * (1 + std::cos(M_PI * 47.0 / 95.0))));
        CHECK(s.at(99) < 1e-3);
    }

    TEST_CASE("decay only: p scales by (1 - lr wd) per step") {
        Tensor p = random_tensor({5}, 1);
        const Tensor start = p;
        AdamW opt({{"p", &p}}, AdamWConfig{0.9, 0.999, 1e-8, 0.05});
        for (int i = 0; i < 10; ++i) {
            p.zero_grad();
            opt.step(0.01);
        }
        for (std::size_t i = 0; i < 5; ++i) {
            CHECK(p[i] == doctest::Approx(start[i] * std::pow(1 - 0.01 * 0.05, 10)).epsilon(1e-14));
        }
    }

    TEST_CASE("zero learning rate leaves parameters bit-exact") {
        Tensor p = random_tensor({4}, 2);
        const Tensor start = p;
        AdamW opt({{"p", &p}}, AdamWConfig{});
        p.grad()[0] = 3.0;
        opt.step(0.0);
        CHECK(bit_equal(p, start));
    }

    TEST_CASE("constant gradient: update magnitude converges to lr") {
        Tensor p({1});
        AdamW opt({{"p", &p}}, AdamWConfig{0.9, 0.999, 1e-8, 0.0});
        double before = 0.0;
        for (int i = 0; i < 1000; ++i) {
            p.zero_grad();
            p.grad()[0] = 0.5;
            before = p[0];
            opt.step(1e-3);
        }
        CHECK(std::abs(std::abs(p[0] - before) - 1e-3) < 1e-6);
    }
}

TEST_SUITE("loss") {
    TEST_CASE("label smoothing has an entropy floor") {
        const double eps = 0.1;
        const std::size_t k = 4;
        const double hi = 1 - eps + eps / k, lo = eps / k;
        const double floor = -hi * std::log(hi) - (k - 1) * lo * std::log(lo);
        Tape tape;
        const Tensor best = Tensor::from({4}, {std::log(lo), std::log(hi), std::log(lo), std::log(lo)});
        CHECK(cross_entropy(tape.constant(best), 1, eps).item() == doctest::Approx(floor).epsilon(1e-12));
        for (std::uint64_t seed = 0; seed < 50; ++seed) {
            const Tensor logits = random_tensor({4}, seed, -20, 20);
            CHECK(cross_entropy(tape.constant(logits), seed % 4, eps).item() >= floor - 1e-12);
        }
    }
}

TEST_SUITE("evaluate") {
    TEST_CASE("always-zero classifier on all-zero labels scores 1") {
        Dataset d = tiny_synth(8, 1);
        std::fill(d.labels.begin(), d.labels.end(), 0);
        ConstantClassifier c(4, 0);
        CHECK(evaluate(c, d).top1 == 1.0);
    }

    TEST_CASE("uniform logits on balanced 10-class data sit at chance") {
        Dataset d;
        d.num_classes = 10;
        d.images = Tensor({1000, 1, 1, 1});
        Rng rng(3);
        for (std::size_t i = 0; i < 1000; ++i) {
            d.labels.push_back(i % 10);
        }
        for (std::size_t i = 1000; i > 1; --i) {
            std::swap(d.labels[i - 1], d.labels[rng.below(i)]);
        }
        // Ties go to the first class, so uniform logits always answer 0.
        ConstantClassifier c(10, 10);
        const EvalMetrics m = evaluate(c, d);
        CHECK(std::abs(m.top1 - 0.1) <= 0.03);
        CHECK(m.loss == doctest::Approx(std::log(10.0)));
    }

    TEST_CASE("repeatable, and independent of the thread count") {
        Model m = Model::build(micro4(), 4);
        const Dataset d = tiny_synth(12, 2);
        const EvalMetrics a = evaluate(m, d), b = evaluate(m, d), c = evaluate(m, d, 3);
        CHECK(a.top1 == b.top1);
        CHECK(a.loss == b.loss);
        CHECK(a.top1 == c.top1);
        CHECK(a.loss == c.loss);
    }
}

TEST_SUITE("train_step") {
    TEST_CASE("zero learning rate leaves the model unchanged") {
        Model m = Model::build(micro4(), 5);
        Model ref = Model::build(micro4(), 5);
        TrainConfig cfg;
        cfg.lr = 0.0;
        cfg.batch = 2;
        Trainer t(m, cfg);
        t.train_step(tiny_synth(4, 1));
        const auto a = m.parameters(), b = ref.parameters();
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(bit_equal(*a[i].tensor, *b[i].tensor));
        }
    }

    TEST_CASE("single batch overfits below 0.05") {
        Model m = Model::build(micro4(), 6);
        TrainConfig cfg;
        cfg.steps = 200;
        cfg.batch = 8;
        cfg.lr = 3e-3;
        cfg.label_smoothing = 0.0;
        cfg.weight_decay = 0.0;
        const Dataset d = tiny_synth(8, 2);
        std::vector<std::size_t> all(8);
        std::iota(all.begin(), all.end(), 0);
        Trainer t(m, cfg);
        double loss = 0.0;
        for (std::size_t s = 0; s < cfg.steps; ++s) {
            loss = t.train_step(d, all).loss;
        }
        CHECK(loss < 0.05);
    }

    TEST_CASE("fixed seed gives a bit-identical trajectory") {
        const Dataset d = tiny_synth(16, 3);
        TrainConfig cfg;
        cfg.steps = 10;
        cfg.batch = 4;
        cfg.seed = 9;
        Model a = Model::build(micro4(), 9), b = Model::build(micro4(), 9);
        const TrainResult ra = train(a, d, nullptr, cfg), rb = train(b, d, nullptr, cfg);
        CHECK(ra.losses == rb.losses);
    }

    TEST_CASE("non-finite gradient aborts before the update and names the parameter") {
        Model m = Model::build(micro4(), 10);
        m.head().weight[0] = std::numeric_limits<double>::quiet_NaN();
        const Tensor before = m.stages()[0].entry.weight;
        TrainConfig cfg;
        cfg.batch = 2;
        Trainer t(m, cfg);
        try {
            t.train_step(tiny_synth(4, 1));
            FAIL("expected NumericalError");
        } catch (const NumericalError& e) {
            CHECK(std::string(e.what()).find("head.") != std::string::npos);
        }
        CHECK(bit_equal(m.stages()[0].entry.weight, before));
    }

    TEST_CASE("batches are epoch-wise permutations") {
        std::vector<int> seen(10, 0);
        for (std::size_t step = 0; step < 5; ++step) {
            for (std::size_t i : batch_indices(10, 2, step, 1)) {
                ++seen[i];
            }
        }
        for (int n : seen) {
            CHECK(n == 1);
        }
    }

    TEST_CASE("metrics rows") {
        Model m = Model::build(micro4(), 11);
        TrainConfig cfg;
        cfg.steps = 4;
        cfg.batch = 2;
        cfg.eval_every = 2;
        const Dataset tr = tiny_synth(8, 1), va = tiny_synth(4, 2);
        std::ostringstream out;
        write_metrics_header(out);
        train(m, tr, &va, cfg, &out);
        std::istringstream in(out.str());
        std::string line;
        std::getline(in, line);
        CHECK(line == "step,split,top1,loss");
        std::size_t train_rows = 0, val_rows = 0;
        while (std::getline(in, line)) {
            (line.find(",val,") != std::string::npos ? val_rows : train_rows)++;
        }
        CHECK(train_rows == 4);
        CHECK(val_rows == 2);
    }
}
