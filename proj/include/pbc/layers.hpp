#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pbc/tensor.hpp"

namespace pbc {

enum class LayerKind : std::uint8_t { conv2d = 0, batch_norm = 1, relu = 2 };
enum class Padding : std::uint8_t { valid = 0, same = 1 };
enum class Mode { train, eval };

std::string to_string(LayerKind kind);

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;
inline constexpr double kProbabilityFloor = 1e-12;

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    int kernel_h = 1;
    int kernel_w = 1;
    int stride = 1;
    int in_channels = 1;
    int out_channels = 1;
    Padding padding = Padding::valid;
    bool bias = false;

    static LayerSpec conv(int in, int out, int kernel, int stride, Padding padding, bool bias = false);
    static LayerSpec batch_norm(int channels);
    static LayerSpec relu(int channels);

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

// Throws ConfigError naming the layer index when a layer description is malformed.
void validate(const LayerSpec& spec, std::size_t index);

// floor((in - k) / s) + 1 for valid padding, ceil(in / s) for same padding.
int output_extent(int in, int kernel, int stride, Padding padding);

// Leading pad of a same-padded axis; the trailing side takes the remainder.
int leading_pad(int in, int kernel, int stride, Padding padding);

template <class T>
struct BasicLayer {
    LayerSpec spec;
    BasicTensor<T> weight;       // conv: [out, in, kh, kw]
    BasicTensor<T> bias;         // conv with bias: [out]
    BasicTensor<T> scale;        // batch-norm: [C]
    BasicTensor<T> shift;        // batch-norm: [C]
    BasicTensor<T> running_mean; // batch-norm: [C]
    BasicTensor<T> running_var;  // batch-norm: [C]

    template <class U>
    BasicLayer<U> cast() const
    {
        return BasicLayer<U>{spec,
                             weight.template cast<U>(),
                             bias.template cast<U>(),
                             scale.template cast<U>(),
                             shift.template cast<U>(),
                             running_mean.template cast<U>(),
                             running_var.template cast<U>()};
    }
};

using Layer = BasicLayer<float>;

// Zero weights; batch-norm with scale 1, shift 0, running mean 0, variance 1.
template <class T>
BasicLayer<T> make_layer(const LayerSpec& spec);

// Per-channel statistics of one train-mode batch-norm pass (biased variance).
struct BatchStats {
    std::vector<double> mean;
    std::vector<double> var;
    std::size_t count = 0; // elements per channel
};

// Pools several batches' statistics into those of their union.
BatchStats pool_stats(std::span<const BatchStats> parts);

template <class T>
void update_running_stats(BasicLayer<T>& layer, const BatchStats& stats);

// Output shape for a rank-4 [N, C, H, W] input; throws ShapeError naming the
// layer index and extents on mismatch.
Shape output_shape(const LayerSpec& spec, const Shape& input, std::size_t index = 0);

// Non-mutating forward. In train mode batch-norm normalizes with the batch
// statistics and reports them through `observed` when given.
template <class T>
BasicTensor<T> apply(const BasicLayer<T>& layer, const BasicTensor<T>& input, Mode mode,
                     BatchStats* observed = nullptr, std::size_t index = 0, std::size_t workers = 1);

// Forward that also folds train-mode batch statistics into the running ones.
template <class T>
BasicTensor<T> forward(BasicLayer<T>& layer, const BasicTensor<T>& input, Mode mode, std::size_t index = 0);

template <class T>
struct LayerGrads {
    BasicTensor<T> input;
    BasicTensor<T> weight;
    BasicTensor<T> bias;
    BasicTensor<T> scale;
    BasicTensor<T> shift;
};

// Exact gradients of apply(layer, input, mode) contracted with `upstream`.
template <class T>
LayerGrads<T> backward(const BasicLayer<T>& layer, const BasicTensor<T>& input, const BasicTensor<T>& upstream,
                       Mode mode, std::size_t index = 0, std::size_t workers = 1);

// Max-subtracted exp-normalize. Rejects fewer than two or non-finite entries.
std::vector<double> softmax(std::span<const double> scores);

// -log(max(p[label], kProbabilityFloor)).
double cross_entropy(std::span<const double> probabilities, std::size_t label);

} // namespace pbc
