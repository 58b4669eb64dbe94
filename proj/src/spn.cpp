#include "pbc/spn.hpp"

#include <array>
#include <cmath>
#include <utility>
#include <random>
#include <string>

#include "pbc/bytes.hpp"
#include "pbc/parallel.hpp"
#include "pbc/patching.hpp"

namespace pbc {

namespace {

constexpr char kMagic[8] = {'P', 'B', 'C', 'S', 'P', 'N', '\r', '\n'};

// Serialized tensors of one layer, in file order.
template <class L>
auto payload(L& l)
{
    return std::array{&l.weight, &l.bias, &l.scale, &l.shift, &l.running_mean, &l.running_var};
}

} // namespace

std::vector<LayerSpec> default_stack(int num_classes, int input_channels, StackWidths widths)
{
    const int a = widths.first, b = widths.second;
    std::vector<LayerSpec> stack;
    auto block = [&](int in, int out, int kernel, int stride, Padding padding) {
        stack.push_back(LayerSpec::conv(in, out, kernel, stride, padding));
        stack.push_back(LayerSpec::batch_norm(out));
        stack.push_back(LayerSpec::relu(out));
    };
    block(input_channels, a, 3, 1, Padding::same);
    block(a, a, 3, 1, Padding::same);
    block(a, a, 3, 2, Padding::same);  // 16x16
    block(a, b, 3, 1, Padding::same);
    block(b, b, 3, 1, Padding::same);
    block(b, b, 3, 2, Padding::same);  // 8x8
    block(b, b, 3, 1, Padding::valid); // 6x6
    block(b, b, 1, 1, Padding::valid);
    stack.push_back(LayerSpec::conv(b, num_classes, 6, 1, Padding::valid, true));
    return stack;
}

SpnConfig default_config(int num_classes, int input_channels, std::uint64_t seed, StackWidths widths)
{
    return SpnConfig{num_classes, input_channels, seed, default_stack(num_classes, input_channels, widths)};
}

void validate(const SpnConfig& config)
{
    if (config.num_classes < 2) throw ConfigError("spn: need at least two classes");
    if (config.input_channels != 1 && config.input_channels != 3)
        throw ConfigError("spn: input channels must be 1 or 3, got " + std::to_string(config.input_channels));
    if (config.layers.empty()) throw ConfigError("spn: empty layer stack");
    Shape shape{1, std::size_t(config.input_channels), kStandardExtent, kStandardExtent};
    for (std::size_t i = 0; i < config.layers.size(); ++i) {
        const auto& spec = config.layers[i];
        validate(spec, i);
        try {
            const Shape next = output_shape(spec, shape, i);
            if (i + 1 == config.layers.size()) {
                if (spec.kind != LayerKind::conv2d || spec.kernel_h != 6 || spec.kernel_w != 6 || shape[2] != 6 ||
                    shape[3] != 6 || spec.padding != Padding::valid)
                    throw ConfigError("spn: final layer must be a full-extent 6x6 convolution over a 6x6 map");
                if (spec.out_channels != config.num_classes)
                    throw ConfigError("spn: final layer emits " + std::to_string(spec.out_channels) +
                                      " channels, expected " + std::to_string(config.num_classes));
                if (next[2] != 1 || next[3] != 1) throw ConfigError("spn: final output must be 1x1");
            } else if (next[2] == 0 || next[3] == 0) {
                throw ConfigError("spn: layer " + std::to_string(i) + " collapses the spatial extent");
            }
            shape = next;
        } catch (const ShapeError& e) {
            throw ConfigError(std::string("spn: ") + e.what());
        }
    }
}

SpnModel::SpnModel(SpnConfig config, int patch_size)
    : config_(std::move(config)), patch_size_(patch_size)
{
    validate(config_);
    if (patch_size % 2 != 0 || patch_size < 2 || patch_size > kImageExtent)
        throw ConfigError("spn: patch size " + std::to_string(patch_size) + " must be even and in [2, 32]");
    layers_.reserve(config_.layers.size());
    for (const auto& spec : config_.layers) layers_.push_back(make_layer<float>(spec));
}

std::size_t SpnModel::parameter_count() const
{
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size() + l.scale.size() + l.shift.size();
    return n;
}

SpnModel spn_init(const SpnConfig& config, int patch_size)
{
    SpnModel model(config, patch_size);
    std::mt19937_64 rng(config.seed);
    for (auto& layer : model.layers()) {
        if (layer.spec.kind != LayerKind::conv2d) continue;
        const double fan_in = double(layer.spec.in_channels) * layer.spec.kernel_h * layer.spec.kernel_w;
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
        for (auto& w : layer.weight.values()) w = float(dist(rng));
    }
    return model;
}

Tensor to_batch(std::span<const Image> patches, int channels)
{
    const std::size_t plane = std::size_t(kStandardExtent) * kStandardExtent * channels;
    Tensor batch({patches.size(), std::size_t(channels), kStandardExtent, kStandardExtent});
    for (std::size_t i = 0; i < patches.size(); ++i) {
        const auto& p = patches[i];
        if (p.height != kStandardExtent || p.width != kStandardExtent || p.channels != channels)
            throw ShapeError("spn: patch " + std::to_string(i) + " is " + std::to_string(p.height) + "x" +
                             std::to_string(p.width) + "x" + std::to_string(p.channels) + ", expected 32x32x" +
                             std::to_string(channels));
        std::copy(p.pixels.begin(), p.pixels.end(), batch.data() + i * plane);
    }
    return batch;
}

template <class T>
NetworkTrace<T> network_forward(const std::vector<BasicLayer<T>>& layers, BasicTensor<T> input, Mode mode,
                                std::size_t workers)
{
    NetworkTrace<T> trace;
    trace.inputs.reserve(layers.size());
    trace.stats.resize(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        BasicTensor<T> next = apply(layers[i], input, mode, &trace.stats[i], i, workers);
        trace.inputs.push_back(std::move(input));
        input = std::move(next);
    }
    trace.output = std::move(input);
    return trace;
}

template <class T>
std::vector<LayerGrads<T>> network_backward(const std::vector<BasicLayer<T>>& layers, const NetworkTrace<T>& trace,
                                            BasicTensor<T> upstream, Mode mode, std::size_t workers)
{
    std::vector<LayerGrads<T>> grads(layers.size());
    for (std::size_t i = layers.size(); i-- > 0;) {
        grads[i] = backward(layers[i], trace.inputs[i], upstream, mode, i, workers);
        upstream = std::move(grads[i].input);
    }
    return grads;
}

template NetworkTrace<float> network_forward<float>(const std::vector<Layer>&, Tensor, Mode, std::size_t);
template NetworkTrace<double> network_forward<double>(const std::vector<BasicLayer<double>>&, BasicTensor<double>, Mode,
                                                      std::size_t);
template std::vector<LayerGrads<float>> network_backward<float>(const std::vector<Layer>&, const NetworkTrace<float>&,
                                                                Tensor, Mode, std::size_t);
template std::vector<LayerGrads<double>> network_backward<double>(const std::vector<BasicLayer<double>>&,
                                                                  const NetworkTrace<double>&, BasicTensor<double>,
                                                                  Mode, std::size_t);

namespace {

std::vector<float> run_single(const std::vector<Layer>& layers, const Image& patch, int channels)
{
    Tensor x = to_batch(std::span(&patch, 1), channels);
    for (std::size_t i = 0; i < layers.size(); ++i) x = apply(layers[i], x, Mode::eval, nullptr, i);
    return x.storage();
}

} // namespace

std::vector<float> spn_score(SpnModel& model, const Image& patch, Mode mode)
{
    if (mode == Mode::eval) return spn_score(std::as_const(model), patch);
    Tensor x = to_batch(std::span(&patch, 1), model.config().input_channels);
    for (std::size_t i = 0; i < model.layers().size(); ++i) x = forward(model.layers()[i], x, Mode::train, i);
    return x.storage();
}

std::vector<float> spn_score(const SpnModel& model, const Image& patch)
{
    return run_single(model.layers(), patch, model.config().input_channels);
}

ScoreMatrix spn_batch_score(const SpnModel& model, std::span<const Image> patches, std::size_t workers)
{
    if (patches.empty()) throw std::invalid_argument("spn_batch_score: empty patch list");
    const auto classes = std::size_t(model.num_classes());
    ScoreMatrix m(patches.size(), classes);
    parallel_for(patches.size(), workers, [&](std::size_t i) {
        const auto scores = run_single(model.layers(), patches[i], model.config().input_channels);
        for (std::size_t c = 0; c < classes; ++c) m.at(i, c) = scores[c];
    });
    return m;
}

std::vector<std::uint8_t> spn_serialize(const SpnModel& model)
{
    ByteWriter w;
    w.raw({reinterpret_cast<const std::uint8_t*>(kMagic), sizeof kMagic});
    w.u32(kCheckpointVersion);
    w.u32(std::uint32_t(model.patch_size()));
    w.u32(std::uint32_t(model.num_classes()));
    w.u32(std::uint32_t(model.config().input_channels));
    w.u64(model.config().seed);
    w.u32(std::uint32_t(model.layers().size()));
    for (const auto& layer : model.layers()) {
        const auto& s = layer.spec;
        w.u8(std::uint8_t(s.kind));
        w.u8(std::uint8_t(s.padding));
        w.u8(s.bias ? 1 : 0);
        w.u8(0);
        w.i32(s.kernel_h);
        w.i32(s.kernel_w);
        w.i32(s.stride);
        w.i32(s.in_channels);
        w.i32(s.out_channels);
    }
    std::uint64_t count = 0;
    const auto& layers = model.layers();
    for (auto& layer : layers)
        for (auto* t : payload(layer)) count += t->size();
    w.u64(count);
    for (auto& layer : layers)
        for (auto* t : payload(layer))
            for (float v : t->values()) w.f32(v);
    w.u32(crc32(w.bytes()));
    return std::move(w.bytes());
}

SpnModel spn_deserialize(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < sizeof kMagic + 8) throw DataError("checkpoint: truncated (" + std::to_string(bytes.size()) + " bytes)");
    if (!std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) throw DataError("checkpoint: bad magic");
    const auto body = bytes.first(bytes.size() - 4);
    ByteReader tail(bytes.last(4), "checkpoint");
    const std::uint32_t stored = tail.u32();

    ByteReader r(body, "checkpoint");
    r.take(sizeof kMagic);
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw DataError("checkpoint: format version " + std::to_string(version) + " (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    if (crc32(body) != stored) throw DataError("checkpoint: checksum mismatch (truncated or corrupted file)");

    const int patch_size = int(r.u32());
    SpnConfig config;
    config.num_classes = int(r.u32());
    config.input_channels = int(r.u32());
    config.seed = r.u64();
    const std::uint32_t layer_count = r.u32();
    if (layer_count > 4096) throw DataError("checkpoint: implausible layer count");
    for (std::uint32_t i = 0; i < layer_count; ++i) {
        LayerSpec s;
        s.kind = LayerKind(r.u8());
        s.padding = Padding(r.u8());
        s.bias = r.u8() != 0;
        r.u8();
        s.kernel_h = r.i32();
        s.kernel_w = r.i32();
        s.stride = r.i32();
        s.in_channels = r.i32();
        s.out_channels = r.i32();
        config.layers.push_back(s);
    }
    SpnModel model = [&] {
        try {
            return SpnModel(config, patch_size);
        } catch (const ConfigError& e) {
            throw DataError(std::string("checkpoint: invalid config: ") + e.what());
        }
    }();
    std::uint64_t expected = 0;
    for (auto& layer : model.layers())
        for (auto* t : payload(layer)) expected += t->size();
    if (r.u64() != expected) throw DataError("checkpoint: parameter count does not match the layer stack");
    for (auto& layer : model.layers())
        for (auto* t : payload(layer))
            for (auto& v : t->values()) v = r.f32();
    if (r.remaining() != 0) throw DataError("checkpoint: trailing bytes after payload");
    return model;
}

void spn_save(const SpnModel& model, const std::filesystem::path& path) { write_file_atomic(path, spn_serialize(model)); }

SpnModel spn_load(const std::filesystem::path& path)
{
    if (!std::filesystem::exists(path)) throw MissingArtifact("checkpoint not found: " + path.string());
    try {
        return spn_deserialize(read_file(path));
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

} // namespace pbc
