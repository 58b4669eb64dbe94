#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pbc/aggregation.hpp"
#include "pbc/dataset.hpp"
#include "pbc/spn.hpp"

namespace pbc {

struct TrainConfig {
    int patch_size = 32;
    AggregationKind aggregation = AggregationKind::independent;
    int epochs = 150;
    int batch_size = 50;
    double lr = 1e-3;
    int lr_period = 30; // epochs per halving
    double l2 = 1e-4;
    std::uint64_t seed = 7;
    StackWidths widths;
    int num_classes = 0; // 0: one more than the largest training label
    // Batch-norm statistics are taken over consecutive images of a batch
    // whose patches fit in this many (always at least one image).
    int bn_group_patches = 256;
    std::size_t workers = 1;
    int test_eval_every = 0; // 0: evaluate the test split after the final epoch only

    int stride() const { return train_stride(patch_size); }
};

// lr0 * 2^-floor(epoch / period)
double lr_at(int epoch, const TrainConfig& config);

struct EpochLog {
    int epoch = 0;
    double loss = 0.0;
    double train_acc = 0.0;
    double test_acc = -1.0; // negative when the test split was not evaluated
    double lr = 0.0;
    double seconds = 0.0;
    int skipped_steps = 0;
};

struct TrainLog {
    std::vector<EpochLog> epochs;
    std::vector<std::string> events; // skipped steps and other diagnostics

    // Columns epoch,loss,train_acc,test_acc,lr,seconds (seconds optional).
    std::string to_csv(bool with_seconds = true) const;
};

class TrainingAborted : public std::runtime_error {
public:
    TrainingAborted(const std::string& what, TrainLog log) : std::runtime_error(what), log_(std::move(log)) {}
    const TrainLog& log() const noexcept { return log_; }

private:
    TrainLog log_;
};

struct TrainResult {
    SpnModel model;
    TrainLog log;
};

using EpochCallback = std::function<void(const EpochLog&)>;

TrainResult train_model(std::span<const LabeledImage> train, std::span<const LabeledImage> test,
                        const TrainConfig& config, const EpochCallback& on_epoch = {});

// Standardized patches of one image, in grid order.
struct PatchedImage {
    std::vector<Image> patches;
    std::vector<PatchRef> refs;
    int label = 0;
};

PatchedImage patch_image(const Image& image, int d, int stride, int label = 0, std::int64_t image_id = -1);

template <class T>
struct BatchOutcome {
    double loss = 0.0; // mean cross-entropy over the batch's images; NaN when non-finite
    int correct = 0;
    std::vector<LayerGrads<T>> grads; // d(mean loss)/d(parameters)
    std::vector<BatchStats> stats;    // pooled batch-norm statistics per layer
};

// Forward and backward for one image batch in train mode: patch scores,
// aggregation, softmax, cross-entropy, and gradients routed back through the
// aggregation into the patches its maxima selected.
template <class T>
BatchOutcome<T> batch_gradient(const std::vector<BasicLayer<T>>& layers, std::span<const PatchedImage> images,
                               int channels, AggregationKind kind, int bn_group_patches, std::size_t workers = 1);

// Eval-mode score matrix of every patch of an image at the given stride.
ScoreMatrix score_image(const SpnModel& model, const Image& image, int stride = 1, std::size_t workers = 1);

struct AccuracyReport {
    std::vector<int> correct; // per class
    std::vector<int> total;   // per class
    std::vector<double> per_class;
    double mean_per_class = 0.0;
    double overall = 0.0;
};

AccuracyReport evaluate_accuracy(const SpnModel& model, std::span<const LabeledImage> images, AggregationKind kind,
                                 int stride = 1, std::size_t workers = 1);

// "spn_d{d}_{agg}.ckpt" and "train_d{d}_{agg}.csv".
std::string checkpoint_name(int d, AggregationKind kind);
std::string train_log_name(int d, AggregationKind kind);

} // namespace pbc
