#pragma once

#include "convneur/dataset.hpp"
#include "convneur/model.hpp"
#include "convneur/optim.hpp"

#include <cstdint>
#include <functional>
#include <ostream>
#include <vector>

namespace convneur {

struct TrainConfig {
    std::size_t steps = 500;
    std::size_t batch = 64;
    double lr = 3e-3;
    double warmup_fraction = 0.05;
    double weight_decay = 0.05;
    double label_smoothing = 0.1;
    std::uint64_t seed = 0;
    std::size_t eval_every = 0;  // 0: evaluate only after the last step

    void validate() const;
};

struct StepStats {
    double loss = 0.0;
    double top1 = 0.0;  // on the batch
    double lr = 0.0;
};

// Anything that maps one image to logits.
class Classifier {
public:
    virtual ~Classifier() = default;
    virtual Tensor logits(const Tensor& image) = 0;
};

class ModelClassifier final : public Classifier {
public:
    explicit ModelClassifier(Model& model) : model_(model) {}
    Tensor logits(const Tensor& image) override { return model_.predict_one(image); }

private:
    Model& model_;
};

struct EvalMetrics {
    double top1 = 0.0;
    double loss = 0.0;  // mean unsmoothed cross-entropy
};

EvalMetrics evaluate(Classifier& classifier, const Dataset& data);
EvalMetrics evaluate(Model& model, const Dataset& data);
// Splits the images over `threads` workers; the result does not depend on the count.
EvalMetrics evaluate(Model& model, const Dataset& data, std::size_t threads);

// Batch indices for step `step`: epoch-wise permutations seeded by (seed, epoch).
std::vector<std::size_t> batch_indices(std::size_t dataset_size, std::size_t batch, std::size_t step,
                                       std::uint64_t seed);

class Trainer {
public:
    Trainer(Model& model, const TrainConfig& config);

    // One optimizer step on the given samples. Throws NumericalError naming the
    // first parameter with a non-finite gradient; parameters are left untouched then.
    StepStats train_step(const Dataset& data, const std::vector<std::size_t>& indices);
    // Samples the batch for the next step from `data`.
    StepStats train_step(const Dataset& data);

    std::size_t step() const noexcept { return step_; }
    const LrSchedule& schedule() const noexcept { return schedule_; }
    AdamW& optimizer() noexcept { return optim_; }

private:
    Model& model_;
    TrainConfig config_;
    LrSchedule schedule_;
    AdamW optim_;
    std::size_t step_ = 0;
};

struct TrainLogRow {
    std::size_t step = 0;
    std::string split;
    double top1 = 0.0;
    double loss = 0.0;
};

struct TrainResult {
    std::vector<TrainLogRow> log;
    EvalMetrics final_val;
    std::vector<double> losses;
};

// Runs config.steps steps; writes `step,split,top1,loss` rows to `metrics` if given
// (a train row per step, a val row per evaluation).
TrainResult train(Model& model, const Dataset& train_data, const Dataset* val_data, const TrainConfig& config,
                  std::ostream* metrics = nullptr);

void write_metrics_header(std::ostream& out);

}  // namespace convneur
