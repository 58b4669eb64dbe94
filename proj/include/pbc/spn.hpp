#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "pbc/aggregation.hpp"
#include "pbc/image.hpp"
#include "pbc/layers.hpp"

namespace pbc {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct SpnConfig {
    int num_classes = 10;
    int input_channels = 1;
    std::uint64_t seed = 0;
    std::vector<LayerSpec> layers;

    friend bool operator==(const SpnConfig&, const SpnConfig&) = default;
};

// Channel widths of the two stages of the default stack.
struct StackWidths {
    int first = 96;
    int second = 192;
};

// All-convolutional stack: three 3x3 convs at `first` channels (the third
// strided), three at `second` (the third strided), a valid 3x3 reaching 6x6,
// a 1x1, and a full-extent 6x6 conv emitting raw class scores. Every conv but
// the last is followed by batch-norm and relu.
std::vector<LayerSpec> default_stack(int num_classes, int input_channels, StackWidths widths = {});

SpnConfig default_config(int num_classes, int input_channels, std::uint64_t seed, StackWidths widths = {});

// Throws ConfigError for channel mismatches, a final layer that is not a
// 6x6 conv emitting num_classes channels at 1x1, or invalid counts.
void validate(const SpnConfig& config);

class SpnModel {
public:
    // Parameters zeroed (batch-norm at identity statistics).
    SpnModel(SpnConfig config, int patch_size);

    const SpnConfig& config() const noexcept { return config_; }
    int patch_size() const noexcept { return patch_size_; }
    int num_classes() const noexcept { return config_.num_classes; }
    std::vector<Layer>& layers() noexcept { return layers_; }
    const std::vector<Layer>& layers() const noexcept { return layers_; }
    std::size_t parameter_count() const;

private:
    SpnConfig config_;
    int patch_size_;
    std::vector<Layer> layers_;
};

// He-initialized convolution weights from the seeded generator.
SpnModel spn_init(const SpnConfig& config, int patch_size);

// Packs standardized patches into an [N, C, 32, 32] batch.
Tensor to_batch(std::span<const Image> patches, int channels);

// Activations recorded during a forward pass: inputs[i] feeds layer i.
template <class T>
struct NetworkTrace {
    std::vector<BasicTensor<T>> inputs;
    std::vector<BatchStats> stats; // per layer; filled for train-mode batch-norm
    BasicTensor<T> output;
};

template <class T>
NetworkTrace<T> network_forward(const std::vector<BasicLayer<T>>& layers, BasicTensor<T> input, Mode mode,
                                std::size_t workers = 1);

// Parameter gradients per layer; `upstream` is d(loss)/d(output).
template <class T>
std::vector<LayerGrads<T>> network_backward(const std::vector<BasicLayer<T>>& layers, const NetworkTrace<T>& trace,
                                            BasicTensor<T> upstream, Mode mode, std::size_t workers = 1);

// Raw class scores for one standardized patch. Train mode normalizes with
// the patch's own statistics and folds them into the running ones.
std::vector<float> spn_score(SpnModel& model, const Image& patch, Mode mode);
std::vector<float> spn_score(const SpnModel& model, const Image& patch);

// Eval-mode scores, one row per patch; rows match spn_score bit for bit.
ScoreMatrix spn_batch_score(const SpnModel& model, std::span<const Image> patches, std::size_t workers = 1);

std::vector<std::uint8_t> spn_serialize(const SpnModel& model);
SpnModel spn_deserialize(std::span<const std::uint8_t> bytes);
void spn_save(const SpnModel& model, const std::filesystem::path& path);
SpnModel spn_load(const std::filesystem::path& path);

} // namespace pbc
