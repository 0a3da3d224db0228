#include "convneur/dataset.hpp"

#include "convneur/error.hpp"
#include "convneur/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

namespace convneur {

Tensor Dataset::image(std::size_t index) const {
    if (index >= size()) {
        throw UsageError("dataset index " + std::to_string(index) + " out of range (size " +
                         std::to_string(size()) + ")");
    }
    Shape shape(images.shape().begin() + 1, images.shape().end());
    const std::size_t per = shape_numel(shape);
    const auto values = images.data().subspan(index * per, per);
    return Tensor(std::move(shape), std::vector<double>(values.begin(), values.end()));
}

void Dataset::validate() const {
    if (!empty() && (images.rank() != 4 || images.dim(0) != size())) {
        throw DataError(DataErrorCode::count_mismatch, "dataset holds " + std::to_string(size()) +
                                                           " labels but images of shape " +
                                                           shape_to_string(images.shape()));
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= num_classes) {
            throw DataError(DataErrorCode::invalid_value, "label " + std::to_string(labels[i]) + " at index " +
                                                              std::to_string(i) + " is outside [0, " +
                                                              std::to_string(num_classes) + ")");
        }
    }
    for (double v : images.data()) {
        if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
            throw DataError(DataErrorCode::invalid_value, "image value outside [0, 1]");
        }
    }
}

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError(DataErrorCode::missing_file, "cannot open data file: " + path.string());
    }
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset, const std::filesystem::path& path) {
    if (offset + 4 > bytes.size()) {
        throw DataError(DataErrorCode::truncated, "truncated IDX header in " + path.string());
    }
    return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
           (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::size_t num_classes, const std::string& split) {
    const auto img = read_file(images_path);
    const auto lab = read_file(labels_path);

    const std::uint32_t img_magic = read_be32(img, 0, images_path);
    if (img_magic != 0x00000803) {
        throw DataError(DataErrorCode::wrong_magic, "wrong magic in image file " + images_path.string());
    }
    const std::uint32_t lab_magic = read_be32(lab, 0, labels_path);
    if (lab_magic != 0x00000801) {
        throw DataError(DataErrorCode::wrong_magic, "wrong magic in label file " + labels_path.string());
    }
    const std::size_t n = read_be32(img, 4, images_path);
    const std::size_t rows = read_be32(img, 8, images_path);
    const std::size_t cols = read_be32(img, 12, images_path);
    const std::size_t n_labels = read_be32(lab, 4, labels_path);
    if (img.size() - 16 < n * rows * cols) {
        throw DataError(DataErrorCode::truncated, "truncated image payload in " + images_path.string() +
                                                      ": header declares " + std::to_string(n) + " images of " +
                                                      std::to_string(rows) + "x" + std::to_string(cols) + ", file holds " +
                                                      std::to_string(img.size() - 16) + " payload bytes");
    }
    if (lab.size() - 8 < n_labels) {
        throw DataError(DataErrorCode::truncated, "truncated label payload in " + labels_path.string() +
                                                      ": header declares " + std::to_string(n_labels) +
                                                      " labels, file holds " + std::to_string(lab.size() - 8));
    }
    if (n != n_labels) {
        throw DataError(DataErrorCode::count_mismatch, "count mismatch: " + std::to_string(n) + " images vs " +
                                                           std::to_string(n_labels) + " labels");
    }

    Dataset d;
    d.split = split;
    if (n > 0) {
        if (rows == 0 || cols == 0) {
            throw DataError(DataErrorCode::invalid_value, "zero image extent in " + images_path.string());
        }
        d.images = Tensor({n, 1, rows, cols});
        auto data = d.images.data();
        for (std::size_t i = 0; i < n * rows * cols; ++i) {
            data[i] = static_cast<double>(img[16 + i]) / 255.0;
        }
    }
    std::size_t max_label = 0;
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        d.labels[i] = lab[8 + i];
        max_label = std::max(max_label, d.labels[i]);
    }
    d.num_classes = num_classes ? num_classes : (n ? max_label + 1 : 0);
    d.validate();
    return d;
}

Dataset adapt_channels(const Dataset& data, std::size_t channels, std::size_t multiple) {
    Dataset out;
    out.labels = data.labels;
    out.num_classes = data.num_classes;
    out.split = data.split;
    if (data.empty()) {
        return out;
    }
    const std::size_t n = data.images.dim(0), c_in = data.images.dim(1);
    const std::size_t h = data.images.dim(2), w = data.images.dim(3);
    const std::size_t ph = (h + multiple - 1) / multiple * multiple, pw = (w + multiple - 1) / multiple * multiple;
    const std::size_t oy = (ph - h) / 2, ox = (pw - w) / 2;
    out.images = Tensor({n, channels, ph, pw});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t src_c = c % c_in;
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t x = 0; x < w; ++x) {
                    out.images[((i * channels + c) * ph + y + oy) * pw + x + ox] =
                        data.images[((i * c_in + src_c) * h + y) * w + x];
                }
            }
        }
    }
    return out;
}

std::size_t orientation_class(double dy, double dx, std::size_t num_classes) {
    double angle = std::atan2(-dy, dx) * 180.0 / std::numbers::pi;  // counter-clockwise, y up
    angle = std::fmod(angle + 360.0, 180.0);
    const double width = 180.0 / static_cast<double>(num_classes);
    const auto bin = static_cast<std::size_t>(std::floor((angle + width / 2.0) / width));
    return bin % num_classes;
}

Dataset synth_global_task(std::size_t n, std::size_t image_size, std::size_t num_classes, std::uint64_t seed,
                          const std::string& split, const SynthOptions& options) {
    if (image_size < 16) {
        throw ConfigError("synthetic task needs image_size >= 16, got " + std::to_string(image_size));
    }
    if (num_classes < 2) {
        throw ConfigError("synthetic task needs at least 2 classes");
    }
    if (2 * options.margin + image_size / 2 >= image_size) {
        throw ConfigError("synthetic task margin leaves no room for marker pairs");
    }
    Dataset d;
    d.num_classes = num_classes;
    d.split = split;
    if (n == 0) {
        return d;
    }
    const std::size_t s = image_size, channels = 3;
    const double min_dist = static_cast<double>(s) / 2.0;
    const std::size_t lo = options.margin, span = s - 2 * options.margin;
    d.images = Tensor({n, channels, s, s});
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(mix_seed(seed, i));
        const std::size_t target = i % num_classes;
        std::size_t y0, x0, y1, x1;
        while (true) {
            y0 = lo + rng.below(span);
            x0 = lo + rng.below(span);
            y1 = lo + rng.below(span);
            x1 = lo + rng.below(span);
            const double dy = static_cast<double>(y1) - static_cast<double>(y0);
            const double dx = static_cast<double>(x1) - static_cast<double>(x0);
            if (std::hypot(dy, dx) >= min_dist && orientation_class(dy, dx, num_classes) == target) {
                break;
            }
        }
        d.labels[i] = target;
        double* img = d.images.data().data() + i * channels * s * s;
        for (std::size_t p = 0; p < channels * s * s; ++p) {
            img[p] = rng.uniform(0.0, options.noise_max);
        }
        for (auto [cy, cx] : {std::pair{y0, x0}, std::pair{y1, x1}}) {
            for (std::size_t c = 0; c < channels; ++c) {
                for (std::size_t y = cy - 1; y <= cy + 1; ++y) {
                    for (std::size_t x = cx - 1; x <= cx + 1; ++x) {
                        img[(c * s + y) * s + x] = rng.uniform(options.marker_min, 1.0);
                    }
                }
            }
        }
    }
    return d;
}

namespace {

// Mean of the zero-padded patch at every position: f[c, dy, dx].
std::vector<double> patch_features(const Tensor& images, std::size_t index, std::size_t patch) {
    const std::size_t c = images.dim(1), h = images.dim(2), w = images.dim(3);
    const long half = static_cast<long>(patch / 2);
    std::vector<double> features;
    features.reserve(c * patch * patch);
    std::vector<double> integral((h + 1) * (w + 1));
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* img = images.data().data() + (index * c + ch) * h * w;
        for (std::size_t y = 0; y < h; ++y) {
            double row = 0.0;
            for (std::size_t x = 0; x < w; ++x) {
                row += img[y * w + x];
                integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
            }
        }
        for (long dy = -half; dy <= half; ++dy) {
            for (long dx = -half; dx <= half; ++dx) {
                // Patch offset (dy, dx) visits pixels y + dy for every y in [0, h).
                const long y0 = std::max(0L, dy), y1 = std::min(static_cast<long>(h), static_cast<long>(h) + dy);
                const long x0 = std::max(0L, dx), x1 = std::min(static_cast<long>(w), static_cast<long>(w) + dx);
                const auto at = [&](long y, long x) { return integral[static_cast<std::size_t>(y) * (w + 1) + x]; };
                const double total = at(y1, x1) - at(y0, x1) - at(y1, x0) + at(y0, x0);
                features.push_back(total / static_cast<double>(h * w));
            }
        }
    }
    return features;
}

}  // namespace

double linear_probe_accuracy(const Dataset& train, const Dataset& val, const ProbeOptions& options) {
    if (train.empty() || val.empty()) {
        throw UsageError("linear probe needs nonempty train and validation sets");
    }
    const std::size_t k = train.num_classes;
    auto extract = [&](const Dataset& d) {
        std::vector<std::vector<double>> rows;
        for (std::size_t i = 0; i < d.size(); ++i) {
            rows.push_back(patch_features(d.images, i, options.patch));
        }
        return rows;
    };
    auto xtr = extract(train);
    auto xva = extract(val);
    const std::size_t f = xtr.front().size();

    std::vector<double> mu(f, 0.0), sd(f, 0.0);
    for (const auto& r : xtr) {
        for (std::size_t j = 0; j < f; ++j) {
            mu[j] += r[j] / static_cast<double>(xtr.size());
        }
    }
    for (const auto& r : xtr) {
        for (std::size_t j = 0; j < f; ++j) {
            sd[j] += (r[j] - mu[j]) * (r[j] - mu[j]) / static_cast<double>(xtr.size());
        }
    }
    for (double& s : sd) {
        s = std::sqrt(s) + 1e-12;
    }
    for (auto* rows : {&xtr, &xva}) {
        for (auto& r : *rows) {
            for (std::size_t j = 0; j < f; ++j) {
                r[j] = (r[j] - mu[j]) / sd[j];
            }
        }
    }

    // Full-batch gradient descent on softmax cross-entropy.
    std::vector<double> weight(k * f, 0.0), bias(k, 0.0), gw(k * f), gb(k), logits(k);
    auto scores = [&](const std::vector<double>& x) {
        double mx = -1e300;
        for (std::size_t c = 0; c < k; ++c) {
            double z = bias[c];
            for (std::size_t j = 0; j < f; ++j) {
                z += weight[c * f + j] * x[j];
            }
            logits[c] = z;
            mx = std::max(mx, z);
        }
        double norm = 0.0;
        for (double& z : logits) {
            z = std::exp(z - mx);
            norm += z;
        }
        for (double& z : logits) {
            z /= norm;
        }
    };
    const double inv_n = 1.0 / static_cast<double>(xtr.size());
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        std::fill(gw.begin(), gw.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        for (std::size_t i = 0; i < xtr.size(); ++i) {
            scores(xtr[i]);
            for (std::size_t c = 0; c < k; ++c) {
                const double delta = (logits[c] - (train.labels[i] == c ? 1.0 : 0.0)) * inv_n;
                gb[c] += delta;
                for (std::size_t j = 0; j < f; ++j) {
                    gw[c * f + j] += delta * xtr[i][j];
                }
            }
        }
        for (std::size_t p = 0; p < weight.size(); ++p) {
            weight[p] -= options.lr * (gw[p] + options.l2 * weight[p]);
        }
        for (std::size_t c = 0; c < k; ++c) {
            bias[c] -= options.lr * gb[c];
        }
    }

    std::size_t correct = 0;
    for (std::size_t i = 0; i < xva.size(); ++i) {
        scores(xva[i]);
        const auto best = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
        correct += best == val.labels[i] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(xva.size());
}

}  // namespace convneur
