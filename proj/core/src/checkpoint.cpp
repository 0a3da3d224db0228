#include "convneur/checkpoint.hpp"

#include "convneur/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

namespace convneur {

namespace {

constexpr char kMagic[4] = {'C', 'N', 'U', 'R'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
public:
    template <typename T>
    void put(T value) {
        char bytes[sizeof(T)];
        std::memcpy(bytes, &value, sizeof(T));
        buf_.append(bytes, sizeof(T));
    }
    void put_bytes(const void* data, std::size_t n) { buf_.append(static_cast<const char*>(data), n); }
    const std::string& bytes() const { return buf_; }

private:
    std::string buf_;
};

class Reader {
public:
    explicit Reader(std::vector<char> data) : data_(std::move(data)) {}

    template <typename T>
    T get(const char* what) {
        T value;
        take(&value, sizeof(T), what);
        return value;
    }
    void take(void* out, std::size_t n, const char* what) {
        if (n > data_.size() - pos_) {
            throw CheckpointError(CheckpointErrorCode::truncated,
                                  std::string("truncated checkpoint: file ends inside ") + what);
        }
        std::memcpy(out, data_.data() + pos_, n);
        pos_ += n;
    }
    std::string string(std::size_t n, const char* what) {
        std::string s(n, '\0');
        take(s.data(), n, what);
        return s;
    }
    bool at_end() const { return pos_ == data_.size(); }

private:
    std::vector<char> data_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(Model& model, const std::filesystem::path& path, std::uint64_t step, std::uint64_t rng_state) {
    Writer w;
    w.put_bytes(kMagic, sizeof(kMagic));
    w.put<std::uint32_t>(kCheckpointVersion);
    const std::string config = model.config().to_text();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(config.size()));
    w.put_bytes(config.data(), config.size());
    w.put<std::uint64_t>(step);
    w.put<std::uint64_t>(rng_state);
    const auto params = model.parameters();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
    for (const NamedTensor& p : params) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(p.name.size()));
        w.put_bytes(p.name.data(), p.name.size());
        w.put<std::uint32_t>(static_cast<std::uint32_t>(p.tensor->rank()));
        for (std::size_t e : p.tensor->shape()) {
            w.put<std::uint64_t>(e);
        }
        w.put_bytes(p.tensor->data().data(), p.tensor->numel() * sizeof(double));
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw CheckpointError(CheckpointErrorCode::io, "cannot open checkpoint for writing: " + path.string());
    }
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) {
        throw CheckpointError(CheckpointErrorCode::io, "failed writing checkpoint: " + path.string());
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CheckpointError(CheckpointErrorCode::io, "cannot open checkpoint: " + path.string());
    }
    Reader r(std::vector<char>(std::istreambuf_iterator<char>(in), {}));

    char magic[4];
    r.take(magic, sizeof(magic), "magic");
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw CheckpointError(CheckpointErrorCode::bad_magic, "not a checkpoint (bad magic): " + path.string());
    }
    const auto version = r.get<std::uint32_t>("version");
    if (version != kCheckpointVersion) {
        throw CheckpointError(CheckpointErrorCode::version_mismatch,
                              "checkpoint version " + std::to_string(version) + " is not supported (expected " +
                                  std::to_string(kCheckpointVersion) + ")");
    }
    const auto config_len = r.get<std::uint32_t>("config length");
    const std::string config_text = r.string(config_len, "config");
    const auto step = r.get<std::uint64_t>("step");
    const auto rng_state = r.get<std::uint64_t>("rng state");

    ModelConfig config;
    try {
        config = ModelConfig::from_text(config_text);
    } catch (const ConfigError& e) {
        throw CheckpointError(CheckpointErrorCode::shape_mismatch,
                              std::string("checkpoint config is invalid: ") + e.what());
    }
    Checkpoint ckpt{Model::build(config, 0), step, rng_state};
    auto params = ckpt.model.parameters();

    const auto count = r.get<std::uint32_t>("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.get<std::uint32_t>("tensor name length");
        const std::string name = r.string(name_len, "tensor name");
        const auto rank = r.get<std::uint32_t>("tensor rank");
        Shape shape(rank);
        for (auto& e : shape) {
            e = r.get<std::uint64_t>("tensor extents");
        }
        if (i >= params.size() || params[i].name != name) {
            throw CheckpointError(CheckpointErrorCode::shape_mismatch,
                                  "shape mismatch: tensor '" + name + "' is not expected at position " +
                                      std::to_string(i) + " by the embedded config");
        }
        Tensor& target = *params[i].tensor;
        if (target.shape() != shape) {
            throw CheckpointError(CheckpointErrorCode::shape_mismatch,
                                  "shape mismatch: tensor '" + name + "' stored as " + shape_to_string(shape) +
                                      " but the config implies " + shape_to_string(target.shape()));
        }
        r.take(target.data().data(), target.numel() * sizeof(double), "tensor values");
    }
    if (count != params.size()) {
        throw CheckpointError(CheckpointErrorCode::missing_tensor,
                              "checkpoint holds " + std::to_string(count) + " tensors, config expects " +
                                  std::to_string(params.size()) + " (first missing: '" +
                                  (count < params.size() ? params[count].name : std::string("?")) + "')");
    }
    if (!r.at_end()) {
        throw CheckpointError(CheckpointErrorCode::truncated, "checkpoint has trailing bytes after the last tensor");
    }
    return ckpt;
}

}  // namespace convneur
