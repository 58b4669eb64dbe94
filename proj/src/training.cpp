#include "pbc/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "pbc/optim.hpp"
#include "pbc/parallel.hpp"

namespace pbc {

double lr_at(int epoch, const TrainConfig& config)
{
    if (epoch < 0) throw std::invalid_argument("lr_at: negative epoch");
    if (config.lr_period < 1) throw std::invalid_argument("lr_at: period must be positive");
    return std::ldexp(config.lr, -(epoch / config.lr_period));
}

std::string TrainLog::to_csv(bool with_seconds) const
{
    std::ostringstream os;
    os << std::setprecision(9);
    os << "epoch,loss,train_acc,test_acc,lr" << (with_seconds ? ",seconds" : "") << "\n";
    for (const auto& e : epochs) {
        os << e.epoch << ',' << e.loss << ',' << e.train_acc << ',';
        if (e.test_acc >= 0.0) os << e.test_acc;
        os << ',' << e.lr;
        if (with_seconds) os << ',' << std::setprecision(4) << e.seconds << std::setprecision(9);
        os << '\n';
    }
    return os.str();
}

PatchedImage patch_image(const Image& image, int d, int stride, int label, std::int64_t image_id)
{
    if (image.height != kImageExtent || image.width != kImageExtent)
        throw ShapeError("patch_image: expected a 32x32 image");
    PatchGrid grid = make_grid(kImageExtent, d, stride, image_id);
    PatchedImage out;
    out.label = label;
    out.patches.reserve(grid.refs.size());
    for (const auto& ref : grid.refs) out.patches.push_back(standardize(image, ref));
    out.refs = std::move(grid.refs);
    return out;
}

namespace {

template <class T>
void accumulate(BasicTensor<T>& sum, const BasicTensor<T>& part)
{
    if (part.empty()) return;
    if (sum.empty()) {
        sum = part;
        return;
    }
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += part[i];
}

} // namespace

template <class T>
BatchOutcome<T> batch_gradient(const std::vector<BasicLayer<T>>& layers, std::span<const PatchedImage> images,
                               int channels, AggregationKind kind, int bn_group_patches, std::size_t workers)
{
    if (images.empty()) throw std::invalid_argument("batch_gradient: empty batch");
    BatchOutcome<T> out;
    out.grads.resize(layers.size());
    std::vector<std::vector<BatchStats>> stats(layers.size());
    const double inv_images = 1.0 / double(images.size());

    std::size_t begin = 0;
    while (begin < images.size()) {
        std::size_t end = begin + 1;
        std::size_t patches = images[begin].patches.size();
        while (end < images.size() && patches + images[end].patches.size() <= std::size_t(bn_group_patches))
            patches += images[end++].patches.size();

        std::vector<Image> flat;
        flat.reserve(patches);
        for (std::size_t i = begin; i < end; ++i)
            flat.insert(flat.end(), images[i].patches.begin(), images[i].patches.end());
        BasicTensor<T> input = to_batch(flat, channels).template cast<T>();
        flat.clear();
        NetworkTrace<T> trace = network_forward(layers, std::move(input), Mode::train, workers);
        const std::size_t classes = trace.output.extent(1);
        for (std::size_t l = 0; l < layers.size(); ++l)
            if (layers[l].spec.kind == LayerKind::batch_norm) stats[l].push_back(trace.stats[l]);

        BasicTensor<T> upstream(trace.output.shape());
        std::size_t row0 = 0;
        for (std::size_t i = begin; i < end; ++i) {
            const std::size_t rows = images[i].patches.size();
            ScoreMatrix m(rows, classes);
            for (std::size_t k = 0; k < rows * classes; ++k) m.values[k] = double(trace.output[row0 * classes + k]);
            if (!std::all_of(m.values.begin(), m.values.end(), [](double v) { return std::isfinite(v); })) {
                out.loss = std::numeric_limits<double>::quiet_NaN();
                return out;
            }
            const ImageDecision decision = decide(m, kind);
            const auto label = std::size_t(images[i].label);
            out.loss += cross_entropy(decision.probabilities, label) * inv_images;
            if (decision.predicted == label) ++out.correct;
            std::vector<double> image_grad(classes);
            for (std::size_t c = 0; c < classes; ++c)
                image_grad[c] = (decision.probabilities[c] - (c == label ? 1.0 : 0.0)) * inv_images;
            const ScoreMatrix routed = aggregation_backward(m, kind, image_grad);
            for (std::size_t k = 0; k < rows * classes; ++k) upstream[row0 * classes + k] = T(routed.values[k]);
            row0 += rows;
        }

        auto grads = network_backward(layers, trace, std::move(upstream), Mode::train, workers);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            accumulate(out.grads[l].weight, grads[l].weight);
            accumulate(out.grads[l].bias, grads[l].bias);
            accumulate(out.grads[l].scale, grads[l].scale);
            accumulate(out.grads[l].shift, grads[l].shift);
        }
        begin = end;
    }
    if (!std::isfinite(out.loss)) return out;
    out.stats.resize(layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l)
        if (!stats[l].empty()) out.stats[l] = pool_stats(stats[l]);
    return out;
}

template BatchOutcome<float> batch_gradient<float>(const std::vector<Layer>&, std::span<const PatchedImage>, int,
                                                   AggregationKind, int, std::size_t);
template BatchOutcome<double> batch_gradient<double>(const std::vector<BasicLayer<double>>&,
                                                     std::span<const PatchedImage>, int, AggregationKind, int,
                                                     std::size_t);

ScoreMatrix score_image(const SpnModel& model, const Image& image, int stride, std::size_t workers)
{
    if (image.channels != model.config().input_channels)
        throw ShapeError("score_image: image has " + std::to_string(image.channels) + " channels, model expects " +
                         std::to_string(model.config().input_channels));
    PatchedImage patched = patch_image(image, model.patch_size(), stride);
    ScoreMatrix m = spn_batch_score(model, patched.patches, workers);
    m.refs = std::move(patched.refs);
    return m;
}

AccuracyReport evaluate_accuracy(const SpnModel& model, std::span<const LabeledImage> images, AggregationKind kind,
                                 int stride, std::size_t workers)
{
    const auto classes = std::size_t(model.num_classes());
    std::vector<std::size_t> predicted(images.size());
    parallel_for(images.size(), workers, [&](std::size_t i) {
        predicted[i] = decide(score_image(model, images[i].image, stride), kind).predicted;
    });
    AccuracyReport report;
    report.correct.assign(classes, 0);
    report.total.assign(classes, 0);
    int correct = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const int label = images[i].label;
        if (label < 0 || std::size_t(label) >= classes)
            throw DataError("evaluate_accuracy: label " + std::to_string(label) + " outside the model's classes");
        ++report.total[label];
        if (predicted[i] == std::size_t(label)) {
            ++report.correct[label];
            ++correct;
        }
    }
    report.per_class.resize(classes);
    int populated = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        report.per_class[c] = report.total[c] ? double(report.correct[c]) / report.total[c] : 0.0;
        if (report.total[c]) {
            report.mean_per_class += report.per_class[c];
            ++populated;
        }
    }
    if (populated) report.mean_per_class /= populated;
    report.overall = images.empty() ? 0.0 : double(correct) / double(images.size());
    return report;
}

std::string checkpoint_name(int d, AggregationKind kind)
{
    return "spn_d" + std::to_string(d) + "_" + to_string(kind) + ".ckpt";
}

std::string train_log_name(int d, AggregationKind kind)
{
    return "train_d" + std::to_string(d) + "_" + to_string(kind) + ".csv";
}

namespace {

std::vector<ParamBlock> parameter_blocks(std::vector<Layer>& layers, const std::vector<LayerGrads<float>>& grads)
{
    std::vector<ParamBlock> blocks;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        auto& layer = layers[l];
        const auto& g = grads[l];
        if (layer.spec.kind == LayerKind::conv2d) {
            blocks.push_back({layer.weight.values(), g.weight.values(), true});
            if (layer.spec.bias) blocks.push_back({layer.bias.values(), g.bias.values(), false});
        } else if (layer.spec.kind == LayerKind::batch_norm) {
            blocks.push_back({layer.scale.values(), g.scale.values(), false});
            blocks.push_back({layer.shift.values(), g.shift.values(), false});
        }
    }
    return blocks;
}

} // namespace

TrainResult train_model(std::span<const LabeledImage> train, std::span<const LabeledImage> test,
                        const TrainConfig& config, const EpochCallback& on_epoch)
{
    if (train.empty()) throw DataError("train_model: empty training set");
    if (config.epochs < 1 || config.batch_size < 1 || config.lr <= 0.0 || config.l2 < 0.0 || config.lr_period < 1 ||
        config.bn_group_patches < 1)
        throw ConfigError("train_model: epochs, batch size, lr, lr period and bn group must be positive, l2 >= 0");
    const int channels = train.front().image.channels;
    int classes = config.num_classes;
    if (classes == 0)
        for (const auto& s : train) classes = std::max(classes, s.label + 1);
    for (const auto& s : train) {
        if (s.image.channels != channels) throw DataError("train_model: mixed channel counts in training set");
        if (s.label < 0 || s.label >= classes)
            throw DataError("train_model: label " + std::to_string(s.label) + " outside [0, " +
                            std::to_string(classes) + ")");
    }

    TrainResult result{spn_init(default_config(classes, channels, config.seed, config.widths), config.patch_size), {}};
    auto& layers = result.model.layers();
    AdamState adam;
    long step = 0;
    int consecutive_skips = 0;
    const int stride = config.stride();

    std::vector<std::size_t> order(train.size());
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::seed_seq seq{std::uint32_t(config.seed), std::uint32_t(config.seed >> 32), std::uint32_t(epoch)};
        std::mt19937_64 rng(seq);
        std::shuffle(order.begin(), order.end(), rng);

        EpochLog entry;
        entry.epoch = epoch;
        entry.lr = lr_at(epoch, config);
        double loss_sum = 0.0;
        std::size_t seen = 0, correct = 0;

        for (std::size_t b = 0; b < order.size(); b += std::size_t(config.batch_size)) {
            const std::size_t e = std::min(order.size(), b + std::size_t(config.batch_size));
            std::vector<PatchedImage> batch(e - b);
            parallel_for(batch.size(), config.workers, [&](std::size_t i) {
                const auto idx = order[b + i];
                batch[i] = patch_image(train[idx].image, config.patch_size, stride, train[idx].label,
                                       std::int64_t(idx));
            });
            BatchOutcome<float> outcome =
                batch_gradient(layers, std::span<const PatchedImage>(batch), channels, config.aggregation,
                               config.bn_group_patches, config.workers);

            AdamResult applied{false, "non-finite loss"};
            if (std::isfinite(outcome.loss)) {
                auto blocks = parameter_blocks(layers, outcome.grads);
                applied = adam_update(blocks, adam, step + 1, entry.lr, config.l2);
            }
            if (!applied.applied) {
                ++entry.skipped_steps;
                result.log.events.push_back("epoch " + std::to_string(epoch) + " batch " +
                                            std::to_string(b / config.batch_size) + ": step skipped (" +
                                            applied.reason + ")");
                if (++consecutive_skips >= 3) {
                    result.log.epochs.push_back(entry);
                    throw TrainingAborted("training aborted at epoch " + std::to_string(epoch) + " after " +
                                              std::to_string(consecutive_skips) + " consecutive skipped steps; last: " +
                                              applied.reason,
                                          result.log);
                }
                continue;
            }
            consecutive_skips = 0;
            ++step;
            for (std::size_t l = 0; l < layers.size(); ++l)
                if (layers[l].spec.kind == LayerKind::batch_norm) update_running_stats(layers[l], outcome.stats[l]);
            loss_sum += outcome.loss * double(e - b);
            correct += std::size_t(outcome.correct);
            seen += e - b;
        }

        entry.loss = seen ? loss_sum / double(seen) : std::numeric_limits<double>::quiet_NaN();
        entry.train_acc = seen ? double(correct) / double(seen) : 0.0;
        const bool last = epoch + 1 == config.epochs;
        const bool scheduled = config.test_eval_every > 0 && (epoch + 1) % config.test_eval_every == 0;
        if (!test.empty() && (last || scheduled))
            entry.test_acc = evaluate_accuracy(result.model, test, config.aggregation, 1, config.workers).overall;
        entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        result.log.epochs.push_back(entry);
        if (on_epoch) on_epoch(entry);
    }
    return result;
}

} // namespace pbc
