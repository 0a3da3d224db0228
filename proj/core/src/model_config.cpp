#include "convneur/model_config.hpp"

#include "convneur/error.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cmath>
#include <sstream>

namespace convneur {

std::string_view placement_name(Placement placement) noexcept {
    switch (placement) {
        case Placement::none: return "none";
        case Placement::per_stage: return "per_stage";
        case Placement::per_layer: return "per_layer";
    }
    return "?";
}

Placement parse_placement(std::string_view text) {
    if (text == "none") return Placement::none;
    if (text == "per_stage") return Placement::per_stage;
    if (text == "per_layer") return Placement::per_layer;
    throw ConfigError("unknown placement '" + std::string(text) + "' (none, per_stage, per_layer)");
}

std::string_view gate_scope_name(GateScope scope) noexcept {
    return scope == GateScope::stage ? "stage" : "first_block";
}

GateScope parse_gate_scope(std::string_view text) {
    if (text == "stage") return GateScope::stage;
    if (text == "first_block") return GateScope::first_block;
    throw ConfigError("unknown gate_scope '" + std::string(text) + "' (stage, first_block)");
}

void ModelConfig::validate() const {
    for (std::size_t s = 0; s < kStageCount; ++s) {
        if (depths[s] == 0) {
            throw ConfigError("depths[" + std::to_string(s) + "] must be positive");
        }
        if (dims[s] == 0) {
            throw ConfigError("dims[" + std::to_string(s) + "] must be positive");
        }
    }
    if (num_classes < 2) {
        throw ConfigError("num_classes must be at least 2");
    }
    if (image_height == 0 || image_width == 0 || image_height % 32 != 0 || image_width % 32 != 0) {
        throw ConfigError("image size " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                          " is not divisible by 32");
    }
    if (!(init_std > 0.0) || !(memory_qkv_std > 0.0)) {
        throw ConfigError("init_std and memory_qkv_std must be positive");
    }
    local_config().validate();
    fusion.validate();
    if (placement != Placement::none) {
        memory_config().validate();
    }
}

MemoryConfig ModelConfig::memory_config() const {
    MemoryConfig m;
    m.c_mem = c_mem;
    m.chunk_len = chunk_len;
    m.heads = heads;
    m.base_step = base_step;
    m.norm_cap = norm_cap;
    return m;
}

LocalBranchConfig ModelConfig::local_config() const {
    LocalBranchConfig l;
    l.kernel = kernel;
    l.expansion = expansion;
    return l;
}

std::size_t ModelConfig::block_count() const {
    std::size_t n = 0;
    for (std::size_t d : depths) {
        n += d;
    }
    return n;
}

std::size_t ModelConfig::memory_module_count() const {
    switch (placement) {
        case Placement::none: return 0;
        case Placement::per_stage: return kStageCount;
        case Placement::per_layer: return block_count();
    }
    return 0;
}

namespace {

std::string join(const std::array<std::size_t, kStageCount>& values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        out += (i ? "," : "") + std::to_string(values[i]);
    }
    return out;
}

std::string trim(std::string s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

std::size_t parse_size(const std::string& key, const std::string& text) {
    const std::string t = trim(text);
    std::size_t value = 0;
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
    if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
        throw ConfigError("'" + key + "' expects a non-negative integer, got '" + text + "'");
    }
    return value;
}

double parse_real(const std::string& key, const std::string& text) {
    const std::string t = trim(text);
    try {
        std::size_t used = 0;
        const double value = std::stod(t, &used);
        if (used != t.size() || !std::isfinite(value)) {
            throw std::invalid_argument("trailing");
        }
        return value;
    } catch (const std::exception&) {
        throw ConfigError("'" + key + "' expects a real number, got '" + text + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& text) {
    const std::string t = trim(text);
    if (t == "true" || t == "1" || t == "yes") return true;
    if (t == "false" || t == "0" || t == "no") return false;
    throw ConfigError("'" + key + "' expects true or false, got '" + text + "'");
}

std::array<std::size_t, kStageCount> parse_list(const std::string& key, const std::string& text) {
    std::array<std::size_t, kStageCount> out{};
    std::stringstream ss(text);
    std::string item;
    std::size_t n = 0;
    while (std::getline(ss, item, ',')) {
        if (n == kStageCount) {
            throw ConfigError("'" + key + "' must list exactly 4 values, got '" + text + "'");
        }
        out[n++] = parse_size(key, item);
    }
    if (n != kStageCount) {
        throw ConfigError("'" + key + "' must list exactly 4 values, got '" + text + "'");
    }
    return out;
}

// Shortest text that parses back to the same double.
std::string format_real(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

}  // namespace

std::vector<std::string> model_setting_keys() {
    return {"name",        "depths",    "dims",         "c_mem",          "chunk_len",      "heads",
            "base_step",   "norm_cap",  "placement",    "gate_scope",     "fusion",         "drop_path",
            "channel_shared_gate",      "num_classes",  "image_size",     "image_height",   "image_width",
            "kernel",      "expansion", "init_std",     "memory_qkv_std"};
}

void apply_model_setting(ModelConfig& c, const std::string& key, const std::string& raw) {
    const std::string value = trim(raw);
    if (key == "name") c.name = value;
    else if (key == "depths") c.depths = parse_list(key, value);
    else if (key == "dims") c.dims = parse_list(key, value);
    else if (key == "c_mem") c.c_mem = parse_size(key, value);
    else if (key == "chunk_len") c.chunk_len = parse_size(key, value);
    else if (key == "heads") c.heads = parse_size(key, value);
    else if (key == "base_step") c.base_step = parse_real(key, value);
    else if (key == "norm_cap") c.norm_cap = parse_real(key, value);
    else if (key == "placement") c.placement = parse_placement(value);
    else if (key == "gate_scope") c.gate_scope = parse_gate_scope(value);
    else if (key == "fusion") c.fusion.mode = parse_fusion_mode(value);
    else if (key == "drop_path") c.fusion.drop_path_rate = parse_real(key, value);
    else if (key == "channel_shared_gate") c.fusion.channel_shared_gate = parse_bool(key, value);
    else if (key == "num_classes") c.num_classes = parse_size(key, value);
    else if (key == "image_size") c.image_height = c.image_width = parse_size(key, value);
    else if (key == "image_height") c.image_height = parse_size(key, value);
    else if (key == "image_width") c.image_width = parse_size(key, value);
    else if (key == "kernel") c.kernel = parse_size(key, value);
    else if (key == "expansion") c.expansion = parse_size(key, value);
    else if (key == "init_std") c.init_std = parse_real(key, value);
    else if (key == "memory_qkv_std") c.memory_qkv_std = parse_real(key, value);
    else throw ConfigError("unknown model setting '" + key + "'");
}

std::string ModelConfig::to_text() const {
    std::ostringstream os;
    os << "[model]\n"
       << "name = " << name << "\n"
       << "depths = " << join(depths) << "\n"
       << "dims = " << join(dims) << "\n"
       << "c_mem = " << c_mem << "\n"
       << "chunk_len = " << chunk_len << "\n"
       << "heads = " << heads << "\n"
       << "base_step = " << format_real(base_step) << "\n"
       << "norm_cap = " << format_real(norm_cap) << "\n"
       << "placement = " << placement_name(placement) << "\n"
       << "gate_scope = " << gate_scope_name(gate_scope) << "\n"
       << "fusion = " << fusion_mode_name(fusion.mode) << "\n"
       << "drop_path = " << format_real(fusion.drop_path_rate) << "\n"
       << "channel_shared_gate = " << (fusion.channel_shared_gate ? "true" : "false") << "\n"
       << "num_classes = " << num_classes << "\n"
       << "image_height = " << image_height << "\n"
       << "image_width = " << image_width << "\n"
       << "kernel = " << kernel << "\n"
       << "expansion = " << expansion << "\n"
       << "init_std = " << format_real(init_std) << "\n"
       << "memory_qkv_std = " << format_real(memory_qkv_std) << "\n";
    return os.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) { return from_text(text, ModelConfig{}); }

ModelConfig ModelConfig::from_text(const std::string& text, const ModelConfig& base) {
    boost::property_tree::ptree tree;
    std::istringstream in(text);
    try {
        boost::property_tree::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(std::string("malformed config text: ") + e.message() + " at line " +
                          std::to_string(e.line()));
    }
    ModelConfig c = base;
    if (auto model = tree.get_child_optional("model")) {
        if (auto preset_name = model->get_optional<std::string>("preset")) {
            c = preset(trim(*preset_name));
        }
        for (const auto& [key, node] : *model) {
            if (key != "preset") {
                apply_model_setting(c, key, node.data());
            }
        }
    }
    return c;
}

ModelConfig ModelConfig::preset(std::string_view preset_name) {
    ModelConfig c;
    c.name = std::string(preset_name);
    if (preset_name == "M1") {
        c.depths = {2, 2, 6, 2};
        c.dims = {40, 80, 160, 320};
        c.c_mem = 80;
    } else if (preset_name == "M2") {
        c.depths = {2, 2, 6, 2};
        c.dims = {48, 96, 192, 384};
        c.c_mem = 96;
    } else if (preset_name == "M3") {
        c.depths = {2, 2, 6, 2};
        c.dims = {64, 128, 256, 512};
        c.c_mem = 128;
    } else if (preset_name == "M4") {
        c.depths = {2, 2, 8, 2};
        c.dims = {80, 160, 320, 640};
        c.c_mem = 160;
    } else if (preset_name == "micro") {
        c.depths = {1, 1, 1, 1};
        c.dims = {16, 32, 48, 64};
        c.c_mem = 16;
        c.chunk_len = 8;
        c.num_classes = 10;
        c.image_height = c.image_width = 32;
    } else {
        throw ConfigError("unknown preset '" + std::string(preset_name) + "' (M1, M2, M3, M4, micro)");
    }
    return c;
}

std::vector<std::string> ModelConfig::preset_names() { return {"M1", "M2", "M3", "M4", "micro"}; }

}  // namespace convneur
