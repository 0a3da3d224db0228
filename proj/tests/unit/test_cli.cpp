#include "cli.hpp"

#include "convneur/checkpoint.hpp"
#include "convneur/model.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;
using namespace convneur;

namespace {

struct Outcome {
    int code = 0;
    std::string out;
    std::string err;
};

Outcome run(std::vector<std::string> args) {
    args.insert(args.begin(), "convneur");
    std::vector<const char*> argv;
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("convneur_cli_" + name);
    fs::remove_all(p);
    return p;
}

std::map<std::string, std::pair<std::string, std::string>> read_audit(const fs::path& p) {
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    std::map<std::string, std::pair<std::string, std::string>> rows;
    while (std::getline(in, line)) {
        const auto first = line.find(',');
        const auto last = line.rfind(',');
        rows[line.substr(0, first)] = {line.substr(first + 1, last - first - 1), line.substr(last + 1)};
    }
    return rows;
}

std::vector<std::string> quick_train(const fs::path& dir) {
    return {"train", "--steps", "3", "--batch", "2", "--synth-train", "8", "--synth-val", "4", "--out", dir.string()};
}

}  // namespace

TEST_SUITE("cli") {
    TEST_CASE("--help lists every flag of every command with its default") {
        for (const std::string& cmd : cli::commands()) {
            const std::string help = cli::command_help(cmd);
            for (const cli::Setting& s : cli::command_settings(cmd)) {
                CHECK_MESSAGE(help.find("--" + s.flag + " ") != std::string::npos, cmd << " --" << s.flag);
                if (!s.default_value.empty()) {
                    CHECK_MESSAGE(help.find("[" + s.default_value + "]") != std::string::npos,
                                  cmd << " --" << s.flag << " default");
                }
            }
            const Outcome o = run({cmd, "--help"});
            CHECK(o.code == 0);
            CHECK(o.out == help);
        }
    }

    TEST_CASE("undocumented flags are rejected") {
        CHECK(run({"flops", "--no-such-flag", "1"}).code == 2);
        CHECK(run({"frobnicate"}).code == 2);
        CHECK(run({}).code == 2);
    }

    TEST_CASE("flops: report, reference comparison, bad resolution, bad preset") {
        const Outcome o = run({"flops", "--preset", "M3"});
        CHECK(o.code == 0);
        CHECK(o.out.find("table reference 1.77 G") != std::string::npos);
        CHECK(run({"flops", "--preset", "M1", "--res", "225"}).code == 2);
        CHECK(run({"flops", "--preset", "M7"}).code == 2);
    }

    TEST_CASE("bench writes one CSV row per resolution") {
        const Outcome o = run({"bench", "--preset", "M2", "--res", "224,448,896", "--time", "false"});
        CHECK(o.code == 0);
        std::istringstream in(o.out);
        std::string line;
        std::size_t rows = 0;
        std::getline(in, line);
        CHECK(line.rfind("resolution,", 0) == 0);
        while (std::getline(in, line)) {
            ++rows;
        }
        CHECK(rows == 3);
    }

    TEST_CASE("verify filters suites and fails on a broken backward rule") {
        const Outcome one = run({"verify", "--only", "chunk-invariance", "--seeds", "2"});
        CHECK(one.code == 0);
        CHECK(one.out.find("PASS chunk-invariance") != std::string::npos);
        CHECK(one.out.find("(1 suites)") != std::string::npos);
        const Outcome broken = run({"verify", "--only", "gradcheck-ops", "--seeds", "1", "--broken-backward", "matmul"});
        CHECK(broken.code == 1);
        CHECK(broken.out.find("FAIL gradcheck-ops") != std::string::npos);
        CHECK(broken.out.find("max rel. error") != std::string::npos);
        CHECK(run({"verify", "--only", "nonsense"}).code == 2);
    }

    TEST_CASE("train writes metrics, checkpoint and the config audit; eval reads it back") {
        const fs::path dir = scratch("train");
        auto args = quick_train(dir);
        args.insert(args.end(), {"--seed", "7", "--eval-every", "3"});
        const Outcome o = run(args);
        REQUIRE_MESSAGE(o.code == 0, o.err);
        CHECK(fs::exists(dir / "metrics.csv"));
        CHECK(fs::exists(dir / "model.ckpt"));
        CHECK(fs::exists(dir / "config.ini"));
        const auto audit = read_audit(dir / "config.csv");
        CHECK(audit.at("run.seed") == std::pair<std::string, std::string>{"7", "flag"});
        CHECK(audit.at("train.lr").second == "default");
        CHECK(o.err.find("# train.steps = 3 (flag)") != std::string::npos);

        const Outcome e = run({"eval", "--checkpoint", (dir / "model.ckpt").string(), "--synth-val", "4"});
        CHECK(e.code == 0);
        CHECK(e.out.find("top1 ") != std::string::npos);
        fs::remove_all(dir);
    }

    TEST_CASE("placement ablation: configs differ only in placement") {
        const fs::path a = scratch("abl_a"), b = scratch("abl_b");
        auto args_a = quick_train(a), args_b = quick_train(b);
        args_a.insert(args_a.end(), {"--placement", "none"});
        args_b.insert(args_b.end(), {"--placement", "per_stage"});
        REQUIRE(run(args_a).code == 0);
        REQUIRE(run(args_b).code == 0);
        auto ra = read_audit(a / "config.csv"), rb = read_audit(b / "config.csv");
        std::vector<std::string> differing;
        for (const auto& [key, value] : ra) {
            if (rb.at(key).first != value.first) {
                differing.push_back(key);
            }
        }
        CHECK(differing == std::vector<std::string>{"model.placement"});
        fs::remove_all(a);
        fs::remove_all(b);
    }

    TEST_CASE("precedence: defaults < config file < flags; seed falls back to the environment") {
        const fs::path dir = scratch("prec");
        fs::create_directories(dir);
        const fs::path ini = dir / "run.ini";
        {
            std::ofstream f(ini);
            f << "[train]\nsteps = 2\nlr = 0.0005\n[model]\nfusion = addition\n[data]\nsynth_train = 8\nsynth_val = 4\n";
        }
        const fs::path out = dir / "out";
        ::setenv("CONVNEUR_SEED", "31", 1);
        const Outcome o = run({"train", "--config", ini.string(), "--lr", "0.002", "--batch", "2", "--out", out.string()});
        REQUIRE_MESSAGE(o.code == 0, o.err);
        auto audit = read_audit(out / "config.csv");
        CHECK(audit.at("train.steps") == std::pair<std::string, std::string>{"2", "file"});
        CHECK(audit.at("train.lr") == std::pair<std::string, std::string>{"0.002", "flag"});
        CHECK(audit.at("model.fusion") == std::pair<std::string, std::string>{"addition", "file"});
        CHECK(audit.at("train.warmup").second == "default");
        CHECK(audit.at("run.seed") == std::pair<std::string, std::string>{"31", "env"});

        {
            std::ofstream f(ini, std::ios::app);
            f << "[run]\nseed = 5\n";
        }
        const Outcome o2 = run({"train", "--config", ini.string(), "--batch", "2", "--out", out.string()});
        REQUIRE(o2.code == 0);
        CHECK(read_audit(out / "config.csv").at("run.seed") == std::pair<std::string, std::string>{"5", "file"});
        const Outcome o3 =
            run({"train", "--config", ini.string(), "--batch", "2", "--seed", "6", "--out", out.string()});
        REQUIRE(o3.code == 0);
        CHECK(read_audit(out / "config.csv").at("run.seed") == std::pair<std::string, std::string>{"6", "flag"});
        ::unsetenv("CONVNEUR_SEED");

        {
            std::ofstream f(ini);
            f << "[train]\nbogus = 1\n";
        }
        CHECK(run({"train", "--config", ini.string()}).code == 2);
        CHECK(run({"train", "--config", (dir / "missing.ini").string()}).code == 2);
        fs::remove_all(dir);
    }

    TEST_CASE("same flags, same artifacts") {
        const fs::path a = scratch("det_a"), b = scratch("det_b");
        REQUIRE(run(quick_train(a)).code == 0);
        REQUIRE(run(quick_train(b)).code == 0);
        auto bytes = [](const fs::path& p) {
            std::ifstream in(p, std::ios::binary);
            return std::string(std::istreambuf_iterator<char>(in), {});
        };
        CHECK(bytes(a / "metrics.csv") == bytes(b / "metrics.csv"));
        CHECK(bytes(a / "model.ckpt") == bytes(b / "model.ckpt"));
        fs::remove_all(a);
        fs::remove_all(b);
    }

    TEST_CASE("data and numeric exit codes") {
        const fs::path dir = scratch("codes");
        const Outcome missing = run({"train", "--task", "idx", "--train-images", (dir / "none.idx").string(),
                                     "--train-labels", (dir / "none-labels.idx").string(), "--out", dir.string()});
        CHECK(missing.code == 3);
        CHECK(missing.err.find("none.idx") != std::string::npos);
        CHECK(run({"eval", "--checkpoint", (dir / "absent.ckpt").string()}).code == 3);
        auto args = quick_train(dir);
        args.insert(args.end(), {"--lr", "1e300", "--warmup", "0"});
        CHECK(run(args).code == 4);
        fs::remove_all(dir);
    }

    TEST_CASE("dump-gates: one grid file per stage, closed-form gates, failure modes") {
        const fs::path dir = scratch("gates");
        REQUIRE(run(quick_train(dir / "run")).code == 0);
        const fs::path ckpt = dir / "run" / "model.ckpt";
        const Outcome o = run({"dump-gates", "--checkpoint", ckpt.string(), "--out", (dir / "g").string()});
        REQUIRE(o.code == 0);
        for (std::size_t s = 0; s < 4; ++s) {
            const fs::path f = dir / "g" / ("stage" + std::to_string(s) + ".txt");
            REQUIRE(fs::exists(f));
            std::ifstream in(f);
            std::string line;
            std::getline(in, line);
            const std::size_t side = 8 >> s;
            CHECK(line.find(std::to_string(side) + "x" + std::to_string(side)) != std::string::npos);
        }

        // All-zero proj_out: every gate equals sigmoid(gate_bias).
        Checkpoint c = load_checkpoint(ckpt);
        for (StageParams& st : c.model.stages()) {
            st.memory->proj_out = Tensor(st.memory->proj_out.shape());
            st.blocks[0].fusion.gate_bias[0] = 0.75;
        }
        save_checkpoint(c.model, dir / "zero.ckpt");
        REQUIRE(run({"dump-gates", "--checkpoint", (dir / "zero.ckpt").string(), "--out", (dir / "z").string()}).code ==
                0);
        {
            std::ifstream in(dir / "z" / "stage0.txt");
            std::string line;
            std::getline(in, line);
            std::getline(in, line);  // "# gate channel 0"
            double v = 0.0;
            in >> v;
            CHECK(v == doctest::Approx(1.0 / (1.0 + std::exp(-0.75))).epsilon(1e-15));
        }

        auto args = quick_train(dir / "local");
        args.insert(args.end(), {"--placement", "none"});
        REQUIRE(run(args).code == 0);
        const Outcome local = run({"dump-gates", "--checkpoint", (dir / "local" / "model.ckpt").string()});
        CHECK(local.code == 2);
        CHECK(local.err.find("no gates in this model") != std::string::npos);
        CHECK(run({"dump-gates", "--checkpoint", (dir / "missing.ckpt").string()}).code == 3);
        CHECK(run({"dump-gates", "--checkpoint", ckpt.string(), "--images", (dir / "missing.idx").string()}).code == 3);
        fs::remove_all(dir);
    }
}
