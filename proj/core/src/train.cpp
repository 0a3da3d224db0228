#include "convneur/train.hpp"

#include "convneur/error.hpp"
#include "convneur/ops.hpp"
#include "convneur/rng.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <thread>

namespace convneur {

void TrainConfig::validate() const {
    if (steps == 0) {
        throw ConfigError("steps must be positive");
    }
    if (batch == 0) {
        throw ConfigError("batch must be positive");
    }
    if (!(lr >= 0.0) || !std::isfinite(lr)) {
        throw ConfigError("lr must be a finite non-negative number");
    }
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
        throw ConfigError("warmup fraction must lie in [0, 1)");
    }
    if (!(weight_decay >= 0.0)) {
        throw ConfigError("weight decay must be non-negative");
    }
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
        throw ConfigError("label smoothing must lie in [0, 1)");
    }
}

namespace {

std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

double plain_cross_entropy(std::span<const double> logits, std::size_t target) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double norm = 0.0;
    for (double z : logits) {
        norm += std::exp(z - mx);
    }
    return std::log(norm) + mx - logits[target];
}

}  // namespace

EvalMetrics evaluate(Classifier& classifier, const Dataset& data) {
    if (data.empty()) {
        throw UsageError("cannot evaluate on an empty dataset");
    }
    std::size_t correct = 0;
    double loss = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Tensor logits = classifier.logits(data.image(i));
        if (logits.numel() != data.num_classes) {
            throw ConfigError("classifier emits " + std::to_string(logits.numel()) + " logits for " +
                              std::to_string(data.num_classes) + " classes");
        }
        correct += argmax(logits.data()) == data.labels[i] ? 1 : 0;
        loss += plain_cross_entropy(logits.data(), data.labels[i]);
    }
    const auto n = static_cast<double>(data.size());
    return EvalMetrics{static_cast<double>(correct) / n, loss / n};
}

EvalMetrics evaluate(Model& model, const Dataset& data) {
    ModelClassifier classifier(model);
    return evaluate(classifier, data);
}

EvalMetrics evaluate(Model& model, const Dataset& data, std::size_t threads) {
    if (threads <= 1 || data.size() < 2) {
        return evaluate(model, data);
    }
    if (data.empty()) {
        throw UsageError("cannot evaluate on an empty dataset");
    }
    threads = std::min(threads, data.size());
    // Per-image results are summed in index order afterwards so the total is
    // bit-identical to the sequential path.
    std::vector<int> hit(data.size(), 0);
    std::vector<double> loss(data.size(), 0.0);
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = t; i < data.size(); i += threads) {
                    const Tensor logits = model.predict_one(data.image(i));
                    if (logits.numel() != data.num_classes) {
                        throw ConfigError("model emits " + std::to_string(logits.numel()) + " logits for " +
                                          std::to_string(data.num_classes) + " classes");
                    }
                    hit[i] = argmax(logits.data()) == data.labels[i] ? 1 : 0;
                    loss[i] = plain_cross_entropy(logits.data(), data.labels[i]);
                }
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) {
        th.join();
    }
    for (const auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    std::size_t correct = 0;
    double total = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        correct += static_cast<std::size_t>(hit[i]);
        total += loss[i];
    }
    const auto n = static_cast<double>(data.size());
    return EvalMetrics{static_cast<double>(correct) / n, total / n};
}

std::vector<std::size_t> batch_indices(std::size_t dataset_size, std::size_t batch, std::size_t step,
                                       std::uint64_t seed) {
    if (dataset_size == 0) {
        throw UsageError("cannot draw batches from an empty dataset");
    }
    std::vector<std::size_t> out;
    out.reserve(batch);
    std::size_t position = step * batch;
    std::size_t cached_epoch = static_cast<std::size_t>(-1);
    std::vector<std::size_t> order(dataset_size);
    while (out.size() < batch) {
        const std::size_t epoch = position / dataset_size;
        if (epoch != cached_epoch) {
            std::iota(order.begin(), order.end(), 0);
            Rng rng(mix_seed(seed, 0x5eed, epoch));
            for (std::size_t i = dataset_size; i > 1; --i) {
                std::swap(order[i - 1], order[rng.below(i)]);
            }
            cached_epoch = epoch;
        }
        out.push_back(order[position % dataset_size]);
        ++position;
    }
    return out;
}

Trainer::Trainer(Model& model, const TrainConfig& config)
    : model_(model),
      config_(config),
      schedule_(LrSchedule::with_warmup_fraction(config.lr, config.steps, config.warmup_fraction)),
      optim_(model.parameters(), AdamWConfig{0.9, 0.999, 1e-8, config.weight_decay}) {
    config_.validate();
}

StepStats Trainer::train_step(const Dataset& data) {
    return train_step(data, batch_indices(data.size(), config_.batch, step_, config_.seed));
}

StepStats Trainer::train_step(const Dataset& data, const std::vector<std::size_t>& indices) {
    if (indices.empty()) {
        throw UsageError("train_step needs a nonempty batch");
    }
    model_.zero_grad();
    double loss_sum = 0.0;
    std::size_t correct = 0;
    const double inv_batch = 1.0 / static_cast<double>(indices.size());
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const std::size_t i = indices[b];
        Tape tape;
        const std::uint64_t sample_seed = mix_seed(config_.seed, step_, b);
        Var logits = model_.forward(tape, data.image(i), true, sample_seed);
        Var loss = scale(cross_entropy(logits, data.labels[i], config_.label_smoothing), inv_batch);
        if (!std::isfinite(loss.item())) {
            std::string culprit;
            for (const NamedTensor& p : model_.parameters()) {
                if (!p.tensor->all_finite()) {
                    culprit = "; parameter '" + p.name + "' holds non-finite values";
                    break;
                }
            }
            throw NumericalError("non-finite loss at step " + std::to_string(step_) + " (sample " +
                                 std::to_string(i) + ")" + culprit);
        }
        tape.backward(loss);
        loss_sum += loss.item();
        correct += argmax(logits.value().data()) == data.labels[i] ? 1 : 0;
    }
    for (const NamedTensor& p : model_.parameters()) {
        if (p.tensor->has_grad()) {
            for (double g : std::as_const(*p.tensor).grad()) {
                if (!std::isfinite(g)) {
                    throw NumericalError("non-finite gradient in parameter '" + p.name + "' at step " +
                                         std::to_string(step_));
                }
            }
        }
    }
    const double lr = schedule_.at(step_);
    optim_.step(lr);
    ++step_;
    return StepStats{loss_sum, static_cast<double>(correct) * inv_batch, lr};
}

void write_metrics_header(std::ostream& out) { out << "step,split,top1,loss\n"; }

TrainResult train(Model& model, const Dataset& train_data, const Dataset* val_data, const TrainConfig& config,
                  std::ostream* metrics) {
    config.validate();
    if (train_data.empty()) {
        throw DataError(DataErrorCode::empty, "training set is empty");
    }
    if (train_data.num_classes != model.config().num_classes) {
        throw ConfigError("dataset has " + std::to_string(train_data.num_classes) + " classes, model expects " +
                          std::to_string(model.config().num_classes));
    }
    Trainer trainer(model, config);
    TrainResult result;
    auto emit = [&](TrainLogRow row) {
        if (metrics) {
            *metrics << row.step << ',' << row.split << ',' << row.top1 << ',' << row.loss << '\n';
        }
        result.log.push_back(std::move(row));
    };
    for (std::size_t s = 0; s < config.steps; ++s) {
        const StepStats stats = trainer.train_step(train_data);
        result.losses.push_back(stats.loss);
        emit({s + 1, "train", stats.top1, stats.loss});
        const bool last = s + 1 == config.steps;
        if (val_data && !val_data->empty() && (last || (config.eval_every && (s + 1) % config.eval_every == 0))) {
            const EvalMetrics m = evaluate(model, *val_data);
            emit({s + 1, "val", m.top1, m.loss});
            if (last) {
                result.final_val = m;
            }
        }
    }
    return result;
}

}  // namespace convneur
