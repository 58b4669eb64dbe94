#include "pbc/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>

#include "pbc/parallel.hpp"

namespace pbc {

namespace {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Samples per gradient-accumulation block. Fixed so the reduction order does
// not depend on the worker count.
constexpr std::size_t kGradBlock = 16;

std::string extents(const Shape& s) { return to_string(s); }

[[noreturn]] void shape_fail(std::size_t index, const LayerSpec& spec, const std::string& what)
{
    throw ShapeError("layer " + std::to_string(index) + " (" + to_string(spec.kind) + "): " + what);
}

struct ConvGeometry {
    int n, cin, h, w, cout, kh, kw, stride, ho, wo, pad_top, pad_left;
    std::size_t k() const { return std::size_t(cin) * kh * kw; }
    std::size_t p() const { return std::size_t(ho) * wo; }
    bool direct() const
    {
        // im2col is the identity for 1x1 stride-1 kernels and for valid
        // kernels covering the whole input.
        return (kh == 1 && kw == 1 && stride == 1) || (kh == h && kw == w && pad_top == 0 && pad_left == 0);
    }
};

ConvGeometry conv_geometry(const LayerSpec& spec, const Shape& in)
{
    ConvGeometry g{};
    g.n = int(in[0]);
    g.cin = int(in[1]);
    g.h = int(in[2]);
    g.w = int(in[3]);
    g.cout = spec.out_channels;
    g.kh = spec.kernel_h;
    g.kw = spec.kernel_w;
    g.stride = spec.stride;
    g.ho = output_extent(g.h, g.kh, g.stride, spec.padding);
    g.wo = output_extent(g.w, g.kw, g.stride, spec.padding);
    g.pad_top = leading_pad(g.h, g.kh, g.stride, spec.padding);
    g.pad_left = leading_pad(g.w, g.kw, g.stride, spec.padding);
    return g;
}

template <class T>
void im2col(const ConvGeometry& g, const T* x, T* cols)
{
    const std::size_t p = g.p();
    for (int c = 0; c < g.cin; ++c) {
        const T* plane = x + std::size_t(c) * g.h * g.w;
        for (int ky = 0; ky < g.kh; ++ky) {
            for (int kx = 0; kx < g.kw; ++kx) {
                T* row = cols + ((std::size_t(c) * g.kh + ky) * g.kw + kx) * p;
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride + ky - g.pad_top;
                    T* out = row + std::size_t(oy) * g.wo;
                    if (iy < 0 || iy >= g.h) {
                        std::fill(out, out + g.wo, T{});
                        continue;
                    }
                    const T* src = plane + std::size_t(iy) * g.w;
                    for (int ox = 0; ox < g.wo; ++ox) {
                        const int ix = ox * g.stride + kx - g.pad_left;
                        out[ox] = (ix < 0 || ix >= g.w) ? T{} : src[ix];
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const ConvGeometry& g, const T* cols, T* dx)
{
    const std::size_t p = g.p();
    for (int c = 0; c < g.cin; ++c) {
        T* plane = dx + std::size_t(c) * g.h * g.w;
        for (int ky = 0; ky < g.kh; ++ky) {
            for (int kx = 0; kx < g.kw; ++kx) {
                const T* row = cols + ((std::size_t(c) * g.kh + ky) * g.kw + kx) * p;
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride + ky - g.pad_top;
                    if (iy < 0 || iy >= g.h) continue;
                    T* dst = plane + std::size_t(iy) * g.w;
                    const T* in = row + std::size_t(oy) * g.wo;
                    for (int ox = 0; ox < g.wo; ++ox) {
                        const int ix = ox * g.stride + kx - g.pad_left;
                        if (ix >= 0 && ix < g.w) dst[ix] += in[ox];
                    }
                }
            }
        }
    }
}

template <class T>
std::vector<T>& scratch()
{
    thread_local std::vector<T> buffer;
    return buffer;
}

template <class T>
BasicTensor<T> conv_forward(const BasicLayer<T>& layer, const BasicTensor<T>& input, const Shape& out_shape,
                            std::size_t workers)
{
    const ConvGeometry g = conv_geometry(layer.spec, input.shape());
    BasicTensor<T> out(out_shape);
    const std::size_t k = g.k(), p = g.p();
    const std::size_t in_stride = std::size_t(g.cin) * g.h * g.w;
    const std::size_t out_stride = std::size_t(g.cout) * p;
    Eigen::Map<const RowMatrix<T>> weights(layer.weight.data(), g.cout, Eigen::Index(k));

    parallel_for(std::size_t(g.n), workers, [&](std::size_t n) {
        const T* x = input.data() + n * in_stride;
        const T* cols = x;
        if (!g.direct()) {
            auto& buf = scratch<T>();
            buf.resize(k * p);
            im2col(g, x, buf.data());
            cols = buf.data();
        }
        Eigen::Map<const RowMatrix<T>> colm(cols, Eigen::Index(k), Eigen::Index(p));
        Eigen::Map<RowMatrix<T>> y(out.data() + n * out_stride, g.cout, Eigen::Index(p));
        y.noalias() = weights * colm;
        if (layer.spec.bias) {
            for (int c = 0; c < g.cout; ++c) y.row(c).array() += layer.bias[c];
        }
    });
    return out;
}

template <class T>
LayerGrads<T> conv_backward(const BasicLayer<T>& layer, const BasicTensor<T>& input, const BasicTensor<T>& upstream,
                            std::size_t workers)
{
    const ConvGeometry g = conv_geometry(layer.spec, input.shape());
    const std::size_t k = g.k(), p = g.p();
    const std::size_t in_stride = std::size_t(g.cin) * g.h * g.w;
    const std::size_t out_stride = std::size_t(g.cout) * p;
    Eigen::Map<const RowMatrix<T>> weights(layer.weight.data(), g.cout, Eigen::Index(k));

    LayerGrads<T> grads;
    grads.input = BasicTensor<T>(input.shape());
    const std::size_t blocks = (std::size_t(g.n) + kGradBlock - 1) / kGradBlock;
    std::vector<RowMatrix<T>> block_dw(blocks);
    std::vector<std::vector<T>> block_db(blocks);

    parallel_for(blocks, workers, [&](std::size_t b) {
        RowMatrix<T> dw = RowMatrix<T>::Zero(g.cout, Eigen::Index(k));
        std::vector<T> db(layer.spec.bias ? g.cout : 0, T{});
        std::vector<T> cols_buf;
        std::vector<T> dcols(g.direct() ? 0 : k * p);
        const std::size_t end = std::min<std::size_t>(std::size_t(g.n), (b + 1) * kGradBlock);
        for (std::size_t n = b * kGradBlock; n < end; ++n) {
            const T* x = input.data() + n * in_stride;
            const T* cols = x;
            if (!g.direct()) {
                cols_buf.resize(k * p);
                im2col(g, x, cols_buf.data());
                cols = cols_buf.data();
            }
            Eigen::Map<const RowMatrix<T>> colm(cols, Eigen::Index(k), Eigen::Index(p));
            Eigen::Map<const RowMatrix<T>> dy(upstream.data() + n * out_stride, g.cout, Eigen::Index(p));
            dw.noalias() += dy * colm.transpose();
            for (std::size_t c = 0; c < db.size(); ++c) db[c] += dy.row(Eigen::Index(c)).sum();
            T* dx = grads.input.data() + n * in_stride;
            if (g.direct()) {
                Eigen::Map<RowMatrix<T>> dxm(dx, Eigen::Index(k), Eigen::Index(p));
                dxm.noalias() = weights.transpose() * dy;
            } else {
                Eigen::Map<RowMatrix<T>> dcm(dcols.data(), Eigen::Index(k), Eigen::Index(p));
                dcm.noalias() = weights.transpose() * dy;
                col2im_add(g, dcols.data(), dx);
            }
        }
        block_dw[b] = std::move(dw);
        block_db[b] = std::move(db);
    });

    grads.weight = BasicTensor<T>(layer.weight.shape());
    Eigen::Map<RowMatrix<T>> dw(grads.weight.data(), g.cout, Eigen::Index(k));
    for (auto& part : block_dw) dw += part;
    if (layer.spec.bias) {
        grads.bias = BasicTensor<T>(layer.bias.shape());
        for (auto& part : block_db)
            for (int c = 0; c < g.cout; ++c) grads.bias[c] += part[c];
    }
    return grads;
}

template <class T>
BatchStats channel_stats(const BasicTensor<T>& input, std::size_t workers)
{
    const std::size_t n = input.extent(0), c = input.extent(1);
    const std::size_t plane = input.extent(2) * input.extent(3);
    BatchStats stats;
    stats.mean.assign(c, 0.0);
    stats.var.assign(c, 0.0);
    stats.count = n * plane;
    parallel_for(c, workers, [&](std::size_t ch) {
        double sum = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
            const T* x = input.data() + (s * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) sum += double(x[i]);
        }
        const double mean = sum / double(stats.count);
        double sq = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
            const T* x = input.data() + (s * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const double d = double(x[i]) - mean;
                sq += d * d;
            }
        }
        stats.mean[ch] = mean;
        stats.var[ch] = sq / double(stats.count);
    });
    return stats;
}

// Per-channel normalization constants: x_hat = (x - mean) * inv_std.
template <class T>
void norm_constants(const BasicLayer<T>& layer, const BasicTensor<T>& input, Mode mode, std::size_t workers,
                    std::vector<T>& mean, std::vector<T>& inv_std, BatchStats* observed)
{
    const std::size_t c = input.extent(1);
    mean.resize(c);
    inv_std.resize(c);
    if (mode == Mode::train) {
        BatchStats stats = channel_stats(input, workers);
        for (std::size_t ch = 0; ch < c; ++ch) {
            mean[ch] = T(stats.mean[ch]);
            inv_std[ch] = T(1.0 / std::sqrt(stats.var[ch] + kBatchNormEpsilon));
        }
        if (observed) *observed = std::move(stats);
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mean[ch] = layer.running_mean[ch];
            inv_std[ch] = T(1.0 / std::sqrt(double(layer.running_var[ch]) + kBatchNormEpsilon));
        }
    }
}

template <class T>
BasicTensor<T> bn_forward(const BasicLayer<T>& layer, const BasicTensor<T>& input, Mode mode, BatchStats* observed,
                          std::size_t workers)
{
    std::vector<T> mean, inv_std;
    norm_constants(layer, input, mode, workers, mean, inv_std, observed);
    const std::size_t n = input.extent(0), c = input.extent(1);
    const std::size_t plane = input.extent(2) * input.extent(3);
    BasicTensor<T> out(input.shape());
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const T* x = input.data() + (s * c + ch) * plane;
            T* y = out.data() + (s * c + ch) * plane;
            const T gamma = layer.scale[ch], beta = layer.shift[ch];
            for (std::size_t i = 0; i < plane; ++i) y[i] = gamma * ((x[i] - mean[ch]) * inv_std[ch]) + beta;
        }
    }
    return out;
}

template <class T>
LayerGrads<T> bn_backward(const BasicLayer<T>& layer, const BasicTensor<T>& input, const BasicTensor<T>& upstream,
                          Mode mode, std::size_t workers)
{
    std::vector<T> mean, inv_std;
    norm_constants(layer, input, mode, workers, mean, inv_std, nullptr);
    const std::size_t n = input.extent(0), c = input.extent(1);
    const std::size_t plane = input.extent(2) * input.extent(3);
    const double count = double(n * plane);

    LayerGrads<T> grads;
    grads.input = BasicTensor<T>(input.shape());
    grads.scale = BasicTensor<T>(layer.scale.shape());
    grads.shift = BasicTensor<T>(layer.shift.shape());
    parallel_for(c, workers, [&](std::size_t ch) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
            const T* x = input.data() + (s * c + ch) * plane;
            const T* g = upstream.data() + (s * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                sum_g += double(g[i]);
                sum_gx += double(g[i]) * double((x[i] - mean[ch]) * inv_std[ch]);
            }
        }
        grads.scale[ch] = T(sum_gx);
        grads.shift[ch] = T(sum_g);
        const T gamma_inv = layer.scale[ch] * inv_std[ch];
        const T mean_g = T(sum_g / count), mean_gx = T(sum_gx / count);
        for (std::size_t s = 0; s < n; ++s) {
            const T* x = input.data() + (s * c + ch) * plane;
            const T* g = upstream.data() + (s * c + ch) * plane;
            T* dx = grads.input.data() + (s * c + ch) * plane;
            if (mode == Mode::train) {
                for (std::size_t i = 0; i < plane; ++i) {
                    const T xhat = (x[i] - mean[ch]) * inv_std[ch];
                    dx[i] = gamma_inv * (g[i] - mean_g - xhat * mean_gx);
                }
            } else {
                for (std::size_t i = 0; i < plane; ++i) dx[i] = gamma_inv * g[i];
            }
        }
    });
    return grads;
}

} // namespace

std::string to_string(LayerKind kind)
{
    switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::batch_norm: return "batch-norm";
    case LayerKind::relu: return "relu";
    }
    return "unknown";
}

LayerSpec LayerSpec::conv(int in, int out, int kernel, int stride, Padding padding, bool bias)
{
    return LayerSpec{LayerKind::conv2d, kernel, kernel, stride, in, out, padding, bias};
}

LayerSpec LayerSpec::batch_norm(int channels)
{
    return LayerSpec{LayerKind::batch_norm, 1, 1, 1, channels, channels, Padding::valid, false};
}

LayerSpec LayerSpec::relu(int channels)
{
    return LayerSpec{LayerKind::relu, 1, 1, 1, channels, channels, Padding::valid, false};
}

void validate(const LayerSpec& spec, std::size_t index)
{
    auto fail = [&](const std::string& what) {
        throw ConfigError("layer " + std::to_string(index) + " (" + to_string(spec.kind) + "): " + what);
    };
    if (spec.in_channels < 1 || spec.out_channels < 1) fail("channel counts must be positive");
    switch (spec.kind) {
    case LayerKind::conv2d:
        if (spec.kernel_h < 1 || spec.kernel_w < 1) fail("kernel extents must be >= 1");
        if (spec.stride < 1) fail("stride must be >= 1");
        break;
    case LayerKind::batch_norm:
    case LayerKind::relu:
        if (spec.in_channels != spec.out_channels) fail("must preserve channel count");
        break;
    default: fail("unknown layer kind");
    }
}

int output_extent(int in, int kernel, int stride, Padding padding)
{
    if (padding == Padding::same) return (in + stride - 1) / stride;
    if (in < kernel) return 0;
    return (in - kernel) / stride + 1;
}

int leading_pad(int in, int kernel, int stride, Padding padding)
{
    if (padding == Padding::valid) return 0;
    const int out = output_extent(in, kernel, stride, padding);
    const int total = std::max((out - 1) * stride + kernel - in, 0);
    return total / 2;
}

template <class T>
BasicLayer<T> make_layer(const LayerSpec& spec)
{
    validate(spec, 0);
    BasicLayer<T> layer;
    layer.spec = spec;
    const auto c = std::size_t(spec.out_channels);
    if (spec.kind == LayerKind::conv2d) {
        layer.weight = BasicTensor<T>(
            {c, std::size_t(spec.in_channels), std::size_t(spec.kernel_h), std::size_t(spec.kernel_w)});
        if (spec.bias) layer.bias = BasicTensor<T>({c});
    } else if (spec.kind == LayerKind::batch_norm) {
        layer.scale = BasicTensor<T>({c}, T(1));
        layer.shift = BasicTensor<T>({c}, T(0));
        layer.running_mean = BasicTensor<T>({c}, T(0));
        layer.running_var = BasicTensor<T>({c}, T(1));
    }
    return layer;
}

BatchStats pool_stats(std::span<const BatchStats> parts)
{
    if (parts.empty()) throw std::invalid_argument("pool_stats: no statistics to pool");
    BatchStats pooled;
    const std::size_t c = parts.front().mean.size();
    pooled.mean.assign(c, 0.0);
    pooled.var.assign(c, 0.0);
    for (const auto& part : parts) {
        if (part.mean.size() != c) throw std::invalid_argument("pool_stats: channel count mismatch");
        pooled.count += part.count;
    }
    for (const auto& part : parts) {
        const double w = double(part.count) / double(pooled.count);
        for (std::size_t ch = 0; ch < c; ++ch) pooled.mean[ch] += w * part.mean[ch];
    }
    // Law of total variance.
    for (const auto& part : parts) {
        const double w = double(part.count) / double(pooled.count);
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double d = part.mean[ch] - pooled.mean[ch];
            pooled.var[ch] += w * (part.var[ch] + d * d);
        }
    }
    return pooled;
}

template <class T>
void update_running_stats(BasicLayer<T>& layer, const BatchStats& stats)
{
    if (layer.spec.kind != LayerKind::batch_norm) return;
    const double unbias = stats.count > 1 ? double(stats.count) / double(stats.count - 1) : 1.0;
    for (std::size_t ch = 0; ch < stats.mean.size(); ++ch) {
        layer.running_mean[ch] =
            T(kBatchNormMomentum * double(layer.running_mean[ch]) + (1.0 - kBatchNormMomentum) * stats.mean[ch]);
        layer.running_var[ch] = T(kBatchNormMomentum * double(layer.running_var[ch]) +
                                  (1.0 - kBatchNormMomentum) * stats.var[ch] * unbias);
    }
}

Shape output_shape(const LayerSpec& spec, const Shape& input, std::size_t index)
{
    if (spec.kind == LayerKind::relu) return input;
    if (input.size() != 4) shape_fail(index, spec, "expected rank-4 [N,C,H,W] input, got " + extents(input));
    if (input[1] != std::size_t(spec.in_channels))
        shape_fail(index, spec,
                   "input has " + std::to_string(input[1]) + " channels, expected " + std::to_string(spec.in_channels) +
                       " (input " + extents(input) + ")");
    if (spec.kind == LayerKind::batch_norm) return input;
    const int h = int(input[2]), w = int(input[3]);
    if (spec.padding == Padding::valid && (h < spec.kernel_h || w < spec.kernel_w))
        shape_fail(index, spec,
                   "spatial extent " + std::to_string(h) + "x" + std::to_string(w) + " smaller than kernel " +
                       std::to_string(spec.kernel_h) + "x" + std::to_string(spec.kernel_w));
    return {input[0], std::size_t(spec.out_channels), std::size_t(output_extent(h, spec.kernel_h, spec.stride, spec.padding)),
            std::size_t(output_extent(w, spec.kernel_w, spec.stride, spec.padding))};
}

template <class T>
BasicTensor<T> apply(const BasicLayer<T>& layer, const BasicTensor<T>& input, Mode mode, BatchStats* observed,
                     std::size_t index, std::size_t workers)
{
    const Shape out_shape = output_shape(layer.spec, input.shape(), index);
    switch (layer.spec.kind) {
    case LayerKind::conv2d: return conv_forward(layer, input, out_shape, workers);
    case LayerKind::batch_norm: return bn_forward(layer, input, mode, observed, workers);
    case LayerKind::relu: {
        BasicTensor<T> out(input.shape());
        for (std::size_t i = 0; i < input.size(); ++i) out[i] = std::max(input[i], T(0));
        return out;
    }
    }
    shape_fail(index, layer.spec, "unknown layer kind");
}

template <class T>
BasicTensor<T> forward(BasicLayer<T>& layer, const BasicTensor<T>& input, Mode mode, std::size_t index)
{
    BatchStats stats;
    BasicTensor<T> out = apply(layer, input, mode, &stats, index);
    if (mode == Mode::train && layer.spec.kind == LayerKind::batch_norm) update_running_stats(layer, stats);
    return out;
}

template <class T>
LayerGrads<T> backward(const BasicLayer<T>& layer, const BasicTensor<T>& input, const BasicTensor<T>& upstream,
                       Mode mode, std::size_t index, std::size_t workers)
{
    const Shape out_shape = output_shape(layer.spec, input.shape(), index);
    if (upstream.shape() != out_shape)
        shape_fail(index, layer.spec,
                   "upstream gradient " + extents(upstream.shape()) + " does not match output " + extents(out_shape));
    switch (layer.spec.kind) {
    case LayerKind::conv2d: return conv_backward(layer, input, upstream, workers);
    case LayerKind::batch_norm: return bn_backward(layer, input, upstream, mode, workers);
    case LayerKind::relu: {
        LayerGrads<T> grads;
        grads.input = BasicTensor<T>(input.shape());
        for (std::size_t i = 0; i < input.size(); ++i) grads.input[i] = input[i] > T(0) ? upstream[i] : T(0);
        return grads;
    }
    }
    shape_fail(index, layer.spec, "unknown layer kind");
}

std::vector<double> softmax(std::span<const double> scores)
{
    if (scores.size() < 2) throw std::invalid_argument("softmax: need at least two scores");
    double top = -std::numeric_limits<double>::infinity();
    for (double s : scores) {
        if (!std::isfinite(s)) throw std::invalid_argument("softmax: non-finite score");
        top = std::max(top, s);
    }
    std::vector<double> p(scores.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        p[i] = std::exp(scores[i] - top);
        sum += p[i];
    }
    for (double& v : p) v /= sum;
    return p;
}

double cross_entropy(std::span<const double> probabilities, std::size_t label)
{
    if (label >= probabilities.size())
        throw std::out_of_range("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                                std::to_string(probabilities.size()) + ")");
    return -std::log(std::max(probabilities[label], kProbabilityFloor));
}

#define PBC_INSTANTIATE(T)                                                                                        \
    template BasicLayer<T> make_layer<T>(const LayerSpec&);                                                        \
    template void update_running_stats<T>(BasicLayer<T>&, const BatchStats&);                                      \
    template BasicTensor<T> apply<T>(const BasicLayer<T>&, const BasicTensor<T>&, Mode, BatchStats*, std::size_t,  \
                                     std::size_t);                                                                 \
    template BasicTensor<T> forward<T>(BasicLayer<T>&, const BasicTensor<T>&, Mode, std::size_t);                  \
    template LayerGrads<T> backward<T>(const BasicLayer<T>&, const BasicTensor<T>&, const BasicTensor<T>&, Mode,   \
                                       std::size_t, std::size_t);

PBC_INSTANTIATE(float)
PBC_INSTANTIATE(double)

#undef PBC_INSTANTIATE

} // namespace pbc
