#include "cli.hpp"

#include "convneur/checkpoint.hpp"
#include "convneur/dataset.hpp"
#include "convneur/error.hpp"
#include "convneur/flops.hpp"
#include "convneur/model.hpp"
#include "convneur/rng.hpp"
#include "convneur/train.hpp"
#include "convneur/verify.hpp"

#include <CLI11.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace convneur::cli {

namespace {

namespace fs = std::filesystem;

const char* const kPresetDefault = "(from preset)";

std::vector<Setting> run_settings() {
    return {
        {"run", "seed", "seed", "0", "random seed; falls back to CONVNEUR_SEED, then 0"},
        {"run", "threads", "threads", "1", "worker threads for evaluation"},
    };
}

std::vector<Setting> model_settings(const std::string& preset) {
    std::vector<Setting> s{{"model", "preset", "preset", preset, "model preset: M1, M2, M3, M4 or micro"}};
    const std::vector<std::pair<std::string, std::string>> keys{
        {"depths", "blocks per stage, comma-separated (4 values)"},
        {"dims", "channels per stage, comma-separated (4 values)"},
        {"c_mem", "memory bottleneck channels C_m"},
        {"chunk_len", "tokens per memory chunk L"},
        {"heads", "memory heads"},
        {"base_step", "inner-loop step size scale"},
        {"norm_cap", "Frobenius cap on each fast-weight matrix"},
        {"placement", "memory placement: none, per_stage, per_layer"},
        {"gate_scope", "per-stage gating: stage (all blocks) or first_block"},
        {"fusion", "fusion: gating, addition, concatenation"},
        {"drop_path", "maximum drop-path rate (ramped over depth)"},
        {"channel_shared_gate", "share one spatial gate across channels (true/false)"},
        {"num_classes", "classifier outputs"},
        {"image_size", "input height and width"},
        {"kernel", "depthwise kernel size"},
        {"expansion", "channel-mixing expansion ratio"},
        {"init_std", "truncated-normal std of projections"},
        {"memory_qkv_std", "truncated-normal std of the memory q/k/v maps"},
    };
    for (const auto& [key, help] : keys) {
        std::string flag = key;
        std::replace(flag.begin(), flag.end(), '_', '-');
        s.push_back({"model", key, flag, kPresetDefault, help});
    }
    return s;
}

std::vector<Setting> train_settings() {
    return {
        {"train", "steps", "steps", "500", "optimizer steps"},
        {"train", "batch", "batch", "64", "samples per step"},
        {"train", "lr", "lr", "0.003", "peak learning rate"},
        {"train", "warmup", "warmup", "0.05", "linear warm-up as a fraction of the steps"},
        {"train", "weight_decay", "weight-decay", "0.05", "decoupled weight decay"},
        {"train", "smoothing", "smoothing", "0.1", "label smoothing"},
        {"train", "eval_every", "eval-every", "0", "validation interval in steps (0: only at the end)"},
    };
}

std::vector<Setting> data_settings() {
    return {
        {"data", "task", "task", "synth", "dataset: synth or idx"},
        {"data", "classes", "classes", "4", "synthetic task classes"},
        {"data", "synth_train", "synth-train", "4000", "synthetic training images"},
        {"data", "synth_val", "synth-val", "1000", "synthetic validation images"},
        {"data", "data_seed", "data-seed", "(run seed)", "seed of the synthetic data"},
        {"data", "train_images", "train-images", "", "IDX training images"},
        {"data", "train_labels", "train-labels", "", "IDX training labels"},
        {"data", "val_images", "val-images", "", "IDX validation images"},
        {"data", "val_labels", "val-labels", "", "IDX validation labels"},
    };
}

std::vector<Setting> settings_for(const std::string& command) {
    std::vector<Setting> s = run_settings();
    auto add = [&](std::vector<Setting> more) { s.insert(s.end(), more.begin(), more.end()); };
    if (command == "train") {
        add(model_settings("micro"));
        add(train_settings());
        add(data_settings());
        add({{"output", "out", "out", "convneur-run", "output directory for metrics, config and checkpoint"}});
    } else if (command == "eval") {
        add({{"eval", "checkpoint", "checkpoint", "", "checkpoint to evaluate"}});
        add(data_settings());
    } else if (command == "verify") {
        add({{"verify", "only", "only", "", "comma-separated suites to run (default: all)"},
             {"verify", "seeds", "seeds", "20", "random seeds per suite"},
             {"verify", "broken_backward", "broken-backward", "",
              "negative control: corrupt the backward rule of this op"}});
    } else if (command == "flops") {
        add(model_settings("M1"));
        add({{"flops", "res", "res", "224", "comma-separated input resolutions"}});
    } else if (command == "bench") {
        add(model_settings("M1"));
        add({{"bench", "res", "res", "224,448,896", "comma-separated input resolutions"},
             {"bench", "out", "out", "", "CSV path (default: standard output)"},
             {"bench", "repeats", "repeats", "5", "timed forward passes per resolution (median reported)"},
             {"bench", "time", "time", "true", "measure wall time (true/false)"}});
    } else if (command == "dump-gates") {
        add({{"gates", "checkpoint", "checkpoint", "", "checkpoint to inspect"},
             {"gates", "image_seed", "image-seed", "0", "seed of the synthetic input image"},
             {"gates", "images", "images", "", "IDX image file to take the input from instead"},
             {"gates", "index", "index", "0", "image index within --images"},
             {"gates", "out", "out", "gates", "output directory"}});
    }
    return s;
}

const std::map<std::string, std::string>& descriptions() {
    static const std::map<std::string, std::string> d{
        {"train", "train a model and write metrics, config and checkpoint"},
        {"eval", "evaluate a checkpoint"},
        {"verify", "run the invariant and gradient-check battery"},
        {"flops", "print the analytic cost report"},
        {"bench", "write the resolution scaling sweep as CSV"},
        {"dump-gates", "export per-stage gate and influence maps as numeric grids"},
    };
    return d;
}

std::string section_key(const Setting& s) { return s.section + "." + s.key; }

const char* source_name(Source s) {
    switch (s) {
        case Source::default_value: return "default";
        case Source::file: return "file";
        case Source::flag: return "flag";
        case Source::environment: return "env";
    }
    return "?";
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

std::size_t to_size(const RunConfig& rc, const std::string& key) {
    const std::string& v = rc.get(key);
    try {
        std::size_t used = 0;
        const long long n = std::stoll(v, &used);
        if (used != v.size() || n < 0) {
            throw std::invalid_argument(v);
        }
        return static_cast<std::size_t>(n);
    } catch (const std::exception&) {
        throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
    }
}

double to_real(const RunConfig& rc, const std::string& key) {
    const std::string& v = rc.get(key);
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) {
            throw std::invalid_argument(v);
        }
        return d;
    } catch (const std::exception&) {
        throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
    }
}

bool to_bool(const RunConfig& rc, const std::string& key) {
    const std::string& v = rc.get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("'" + key + "' expects true or false, got '" + v + "'");
}

std::vector<std::size_t> resolutions(const RunConfig& rc, const std::string& key) {
    std::vector<std::size_t> out;
    for (const std::string& item : split_list(rc.get(key))) {
        std::size_t used = 0;
        long long n = -1;
        try {
            n = std::stoll(item, &used);
        } catch (const std::exception&) {
        }
        if (n <= 0 || used != item.size()) {
            throw ConfigError("resolution '" + item + "' is not a positive integer");
        }
        if (n % 32 != 0) {
            throw ConfigError("resolution " + item + " is not divisible by 32");
        }
        out.push_back(static_cast<std::size_t>(n));
    }
    if (out.empty()) {
        throw ConfigError("no resolutions given");
    }
    return out;
}

ModelConfig model_config(const RunConfig& rc) {
    ModelConfig c = ModelConfig::preset(rc.get("model.preset"));
    for (const auto& [key, resolved] : rc.values) {
        if (key.rfind("model.", 0) == 0 && key != "model.preset" && resolved.source != Source::default_value) {
            apply_model_setting(c, key.substr(6), resolved.value);
        }
    }
    c.validate();
    return c;
}

// Reads an INI config file; every key must belong to the command's table.
std::map<std::string, std::string> read_config_file(const std::string& path, const std::vector<Setting>& table) {
    if (!fs::exists(path)) {
        throw ConfigError("config file not found: " + path);
    }
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::read_ini(path, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError("cannot parse config file " + path + ": " + e.message() + " (line " +
                          std::to_string(e.line()) + ")");
    }
    std::map<std::string, std::string> values;
    for (const auto& [section, node] : tree) {
        if (node.empty()) {
            throw ConfigError("config file " + path + ": key '" + section + "' must live in a [section]");
        }
        for (const auto& [key, leaf] : node) {
            const std::string sk = section + "." + key;
            const bool known =
                std::any_of(table.begin(), table.end(), [&](const Setting& s) { return section_key(s) == sk; });
            if (!known) {
                throw ConfigError("config file " + path + ": unknown setting '" + sk + "' for this command");
            }
            values[sk] = leaf.data();
        }
    }
    return values;
}

// Replaces the "(from preset)" placeholders with the preset's actual values so
// the echo and the audit show what will run.
void fill_preset_defaults(RunConfig& rc) {
    const auto it = rc.values.find("model.preset");
    if (it == rc.values.end()) {
        return;
    }
    boost::property_tree::ptree tree;
    std::istringstream in(ModelConfig::preset(it->second.value).to_text());
    boost::property_tree::read_ini(in, tree);
    const auto& model = tree.get_child("model");
    for (auto& [key, resolved] : rc.values) {
        if (key.rfind("model.", 0) == 0 && resolved.source == Source::default_value && key != "model.preset") {
            const std::string name = key.substr(6);
            if (const auto child = model.get_optional<std::string>(name)) {
                resolved.value = *child;
            } else if (name == "image_size") {
                resolved.value = model.get<std::string>("image_height");
            }
        }
    }
}

void echo(const RunConfig& rc, std::ostream& log) {
    log << "# convneur " << rc.command << "\n";
    for (const auto& [key, resolved] : rc.values) {
        log << "# " << key << " = " << resolved.value << " (" << source_name(resolved.source) << ")\n";
    }
}

std::string csv_field(const std::string& v) {
    return v.find_first_of(",\"") == std::string::npos ? v : "\"" + v + "\"";
}

void write_config_audit(const RunConfig& rc, const ModelConfig& model, const fs::path& path) {
    std::ofstream out(path);
    out << "key,value,source\n";
    for (const auto& [key, resolved] : rc.values) {
        if (key.rfind("model.", 0) != 0 && key != "output.out") {
            out << key << ',' << csv_field(resolved.value) << ',' << source_name(resolved.source) << '\n';
        }
    }
    // The effective model, after the preset and overrides are merged.
    boost::property_tree::ptree tree;
    std::istringstream in(model.to_text());
    boost::property_tree::read_ini(in, tree);
    for (const auto& [key, leaf] : tree.get_child("model")) {
        const auto it = rc.values.find("model." + key);
        const Source source = it == rc.values.end() ? Source::default_value : it->second.source;
        out << "model." << key << ',' << csv_field(leaf.data()) << ',' << source_name(source) << '\n';
    }
}

// ---- data ----------------------------------------------------------------

struct Data {
    Dataset train;
    Dataset val;
};

std::uint64_t data_seed(const RunConfig& rc) {
    return rc.explicitly_set("data.data_seed") ? to_size(rc, "data.data_seed") : rc.seed;
}

std::string require_path(const RunConfig& rc, const std::string& key) {
    const std::string& p = rc.get(key);
    if (p.empty()) {
        throw ConfigError("--" + key.substr(key.find('.') + 1) + " is required for the idx task");
    }
    return p;
}

Data load_data(const RunConfig& rc, std::size_t image_size, bool need_train) {
    const std::string task = rc.get("data.task");
    Data d;
    if (task == "synth") {
        const std::size_t classes = to_size(rc, "data.classes");
        const std::uint64_t seed = data_seed(rc);
        if (need_train) {
            d.train = synth_global_task(to_size(rc, "data.synth_train"), image_size, classes, mix_seed(seed, 1),
                                        "train");
        }
        d.val = synth_global_task(to_size(rc, "data.synth_val"), image_size, classes, mix_seed(seed, 2), "val");
        d.val.num_classes = classes;
    } else if (task == "idx") {
        if (need_train) {
            d.train = adapt_channels(
                load_idx(require_path(rc, "data.train_images"), require_path(rc, "data.train_labels"), 0, "train"));
        }
        if (!rc.get("data.val_images").empty() || !need_train) {
            d.val = adapt_channels(
                load_idx(require_path(rc, "data.val_images"), require_path(rc, "data.val_labels"), 0, "val"));
        }
        const std::size_t classes = std::max(d.train.num_classes, d.val.num_classes);
        d.train.num_classes = d.val.num_classes = classes;
    } else {
        throw ConfigError("unknown task '" + task + "' (synth, idx)");
    }
    return d;
}

// ---- commands ------------------------------------------------------------

int cmd_train(const RunConfig& rc, std::ostream& out, std::ostream& err) {
    ModelConfig model_cfg = model_config(rc);
    TrainConfig tc;
    tc.steps = to_size(rc, "train.steps");
    tc.batch = to_size(rc, "train.batch");
    tc.lr = to_real(rc, "train.lr");
    tc.warmup_fraction = to_real(rc, "train.warmup");
    tc.weight_decay = to_real(rc, "train.weight_decay");
    tc.label_smoothing = to_real(rc, "train.smoothing");
    tc.eval_every = to_size(rc, "train.eval_every");
    tc.seed = rc.seed;
    tc.validate();

    if (model_cfg.image_height != model_cfg.image_width && rc.get("data.task") == "synth") {
        throw ConfigError("the synthetic task needs a square image size");
    }
    Data data = load_data(rc, model_cfg.image_height, true);
    if (data.train.empty()) {
        throw DataError(DataErrorCode::empty, "training set is empty");
    }
    if (rc.get("data.task") == "idx") {
        model_cfg.image_height = data.train.images.dim(2);
        model_cfg.image_width = data.train.images.dim(3);
    }
    if (rc.explicitly_set("model.num_classes") && model_cfg.num_classes != data.train.num_classes) {
        throw ConfigError("num_classes " + std::to_string(model_cfg.num_classes) + " disagrees with the dataset's " +
                          std::to_string(data.train.num_classes) + " classes");
    }
    model_cfg.num_classes = data.train.num_classes;
    model_cfg.validate();

    const fs::path dir = rc.get("output.out");
    fs::create_directories(dir);
    write_config_audit(rc, model_cfg, dir / "config.csv");
    {
        std::ofstream ini(dir / "config.ini");
        ini << model_cfg.to_text();
    }
    Model model = Model::build(model_cfg, rc.seed);
    std::ofstream metrics(dir / "metrics.csv");
    write_metrics_header(metrics);
    const TrainResult result = train(model, data.train, data.val.empty() ? nullptr : &data.val, tc, &metrics);
    save_checkpoint(model, dir / "model.ckpt", tc.steps, rc.seed);
    out << "trained " << model_cfg.name << " (" << placement_name(model_cfg.placement) << ", "
        << fusion_mode_name(model_cfg.fusion.mode) << ") for " << tc.steps << " steps, final train loss "
        << result.losses.back();
    if (!data.val.empty()) {
        out << ", val top1 " << result.final_val.top1 << ", val loss " << result.final_val.loss;
    }
    out << "\nwrote " << (dir / "metrics.csv").string() << ", " << (dir / "model.ckpt").string() << "\n";
    err.flush();
    return 0;
}

int cmd_eval(const RunConfig& rc, std::ostream& out) {
    const std::string path = rc.get("eval.checkpoint");
    if (path.empty()) {
        throw ConfigError("--checkpoint is required");
    }
    Checkpoint ckpt = load_checkpoint(path);
    Data data = load_data(rc, ckpt.model.config().image_height, false);
    if (data.val.empty()) {
        throw DataError(DataErrorCode::empty, "evaluation set is empty");
    }
    if (data.val.num_classes != ckpt.model.config().num_classes) {
        throw ConfigError("checkpoint has " + std::to_string(ckpt.model.config().num_classes) +
                          " classes, dataset has " + std::to_string(data.val.num_classes));
    }
    const EvalMetrics m = evaluate(ckpt.model, data.val, to_size(rc, "run.threads"));
    out << "top1 " << m.top1 << "\nloss " << m.loss << "\n";
    return 0;
}

int cmd_verify(const RunConfig& rc, std::ostream& out) {
    VerifyOptions opt;
    opt.only = split_list(rc.get("verify.only"));
    opt.seeds = to_size(rc, "verify.seeds");
    opt.broken_backward = rc.get("verify.broken_backward");
    const auto results = run_verification(opt);
    bool ok = true;
    for (const SuiteResult& r : results) {
        out << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(18) << r.name << ' ' << r.detail << " ["
            << std::fixed << std::setprecision(2) << r.seconds << "s]" << std::defaultfloat << "\n";
        ok = ok && r.passed;
    }
    out << (ok ? "all " : "some ") << "invariants " << (ok ? "passed" : "FAILED") << " (" << results.size()
        << " suites)\n";
    return ok ? 0 : static_cast<int>(ExitCode::verification_failed);
}

int cmd_flops(const RunConfig& rc, std::ostream& out) {
    const ModelConfig config = model_config(rc);
    for (std::size_t res : resolutions(rc, "flops.res")) {
        write_flops_report(out, config, count_flops(config, res, res));
    }
    return 0;
}

int cmd_bench(const RunConfig& rc, std::ostream& out) {
    const ModelConfig config = model_config(rc);
    SweepOptions opt;
    opt.time_forward = to_bool(rc, "bench.time");
    opt.repeats = to_size(rc, "bench.repeats");
    opt.seed = rc.seed;
    const auto rows = scaling_sweep(config, resolutions(rc, "bench.res"), opt);
    const std::string path = rc.get("bench.out");
    if (path.empty()) {
        write_sweep_csv(out, rows);
    } else {
        std::ofstream file(path);
        if (!file) {
            throw ConfigError("cannot write " + path);
        }
        write_sweep_csv(file, rows);
        out << "wrote " << rows.size() << " rows to " << path << "\n";
    }
    return 0;
}

void write_grid(std::ostream& out, const Tensor& map, std::size_t channel) {
    const std::size_t h = map.dim(1), w = map.dim(2);
    out << std::setprecision(17);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            out << (x ? " " : "") << map.at(channel, y, x);
        }
        out << '\n';
    }
}

int cmd_dump_gates(const RunConfig& rc, std::ostream& out) {
    const std::string path = rc.get("gates.checkpoint");
    if (path.empty()) {
        throw ConfigError("--checkpoint is required");
    }
    Checkpoint ckpt = load_checkpoint(path);
    const ModelConfig& config = ckpt.model.config();
    if (config.placement == Placement::none || config.fusion.mode != FusionMode::gating) {
        throw ConfigError("no gates in this model (placement " + std::string(placement_name(config.placement)) +
                          ", fusion " + std::string(fusion_mode_name(config.fusion.mode)) + ")");
    }
    Tensor image;
    if (!rc.get("gates.images").empty()) {
        std::ifstream probe(rc.get("gates.images"));
        if (!probe) {
            throw DataError(DataErrorCode::missing_file, "cannot open image file: " + rc.get("gates.images"));
        }
        probe.close();
        // Labels are not needed; reuse the image file's count with a synthetic label file.
        const fs::path labels = fs::temp_directory_path() / "convneur-dump-labels.idx";
        {
            std::ifstream img(rc.get("gates.images"), std::ios::binary);
            unsigned char header[8] = {};
            img.read(reinterpret_cast<char*>(header), 8);
            std::ofstream lab(labels, std::ios::binary);
            const unsigned char magic[4] = {0, 0, 8, 1};
            lab.write(reinterpret_cast<const char*>(magic), 4);
            lab.write(reinterpret_cast<const char*>(header + 4), 4);
            const std::uint32_t n = (std::uint32_t{header[4]} << 24) | (std::uint32_t{header[5]} << 16) |
                                    (std::uint32_t{header[6]} << 8) | header[7];
            const std::string zeros(n, '\0');
            lab.write(zeros.data(), static_cast<std::streamsize>(zeros.size()));
        }
        Dataset d = adapt_channels(load_idx(rc.get("gates.images"), labels, 1));
        fs::remove(labels);
        image = d.image(to_size(rc, "gates.index"));
    } else {
        if (config.image_height != config.image_width) {
            throw ConfigError("synthetic input needs a square model image size");
        }
        image = synth_global_task(1, config.image_height, 4, to_size(rc, "gates.image_seed")).image(0);
    }
    ForwardTrace trace;
    Tape tape(false);
    ckpt.model.forward(tape, image, false, 0, &trace);

    const fs::path dir = rc.get("gates.out");
    fs::create_directories(dir);
    for (std::size_t s = 0; s < trace.stages.size(); ++s) {
        const StageTrace& st = trace.stages[s];
        if (st.gate.numel() == 0) {
            continue;
        }
        const fs::path file = dir / ("stage" + std::to_string(s) + ".txt");
        std::ofstream f(file);
        const std::size_t c = st.gate.dim(0), h = st.gate.dim(1), w = st.gate.dim(2);
        f << "# stage " << s << " gate A, " << c << " channels of " << h << "x" << w << "\n";
        for (std::size_t ch = 0; ch < c; ++ch) {
            f << "# gate channel " << ch << "\n";
            write_grid(f, st.gate, ch);
        }
        f << "# influence |post-gate - pre-gate|, summed over channels\n";
        write_grid(f, st.influence, 0);
        out << "wrote " << file.string() << " (" << h << "x" << w << ")\n";
    }
    return 0;
}

}  // namespace

const std::string& RunConfig::get(const std::string& section_key) const {
    const auto it = values.find(section_key);
    if (it == values.end()) {
        throw InternalError("setting '" + section_key + "' is not defined for " + command);
    }
    return it->second.value;
}

bool RunConfig::explicitly_set(const std::string& section_key) const {
    const auto it = values.find(section_key);
    return it != values.end() && it->second.source != Source::default_value;
}

std::vector<std::string> commands() { return {"train", "eval", "verify", "flops", "bench", "dump-gates"}; }

std::vector<Setting> command_settings(const std::string& command) { return settings_for(command); }

namespace {

struct Parser {
    CLI::App app{"convneur: two-branch convolutional backbone with chunked neural memory"};
    std::map<std::string, std::map<std::string, std::string>> storage;  // command -> section.key -> value
    std::map<std::string, std::string> config_path;
    std::map<std::string, CLI::App*> subs;

    Parser() {
        app.require_subcommand(1);
        app.set_help_all_flag("--help-all", "show help for every command");
        for (const std::string& cmd : commands()) {
            CLI::App* sub = app.add_subcommand(cmd, descriptions().at(cmd));
            subs[cmd] = sub;
            sub->add_option("--config", config_path[cmd], "INI config file; flags override its values")
                ->default_str("");
            for (const Setting& s : settings_for(cmd)) {
                sub->add_option("--" + s.flag, storage[cmd][section_key(s)], s.help)->default_str(s.default_value);
            }
        }
    }
};

}  // namespace

std::string command_help(const std::string& command) {
    Parser p;
    const auto it = p.subs.find(command);
    if (it == p.subs.end()) {
        throw UsageError("unknown command '" + command + "'");
    }
    return it->second->help();
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    Parser p;
    try {
        p.app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        // Print the help of the innermost command that was named.
        const CLI::App* target = &p.app;
        for (const auto& [name, sub] : p.subs) {
            if (sub->parsed()) {
                target = sub;
            }
        }
        out << target->help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << p.app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return static_cast<int>(ExitCode::config);
    }

    std::string command;
    for (const auto& [name, sub] : p.subs) {
        if (sub->parsed()) {
            command = name;
        }
    }
    try {
        RunConfig rc;
        rc.command = command;
        const auto table = settings_for(command);
        std::map<std::string, std::string> file_values;
        if (!p.config_path[command].empty()) {
            file_values = read_config_file(p.config_path[command], table);
        }
        for (const Setting& s : table) {
            const std::string sk = section_key(s);
            Resolved r{s.default_value, Source::default_value};
            if (p.subs[command]->count("--" + s.flag) > 0) {
                r = {p.storage[command][sk], Source::flag};
            } else if (const auto it = file_values.find(sk); it != file_values.end()) {
                r = {it->second, Source::file};
            } else if (sk == "run.seed") {
                if (const char* env = std::getenv("CONVNEUR_SEED"); env && *env) {
                    r = {env, Source::environment};
                }
            }
            rc.values[sk] = r;
        }
        {
            const std::string& seed = rc.values["run.seed"].value;
            std::size_t used = 0;
            try {
                rc.seed = std::stoull(seed, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != seed.size() || seed.empty() || seed[0] == '-') {
                throw ConfigError("seed must be a non-negative integer, got '" + seed + "'");
            }
            rc.values["run.seed"].value = std::to_string(rc.seed);
        }
        if (to_size(rc, "run.threads") == 0) {
            throw ConfigError("--threads must be at least 1");
        }
        fill_preset_defaults(rc);
        echo(rc, err);

        if (command == "train") return cmd_train(rc, out, err);
        if (command == "eval") return cmd_eval(rc, out);
        if (command == "verify") return cmd_verify(rc, out);
        if (command == "flops") return cmd_flops(rc, out);
        if (command == "bench") return cmd_bench(rc, out);
        if (command == "dump-gates") return cmd_dump_gates(rc, out);
        throw UsageError("unknown command '" + command + "'");
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return static_cast<int>(exit_code_for(e));
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return static_cast<int>(ExitCode::verification_failed);
    }
}

}  // namespace convneur::cli
