#include "pbc/patching.hpp"

#include <algorithm>
#include <string>

#include "pbc/errors.hpp"

namespace pbc {

namespace {

void check_size(int extent, int d)
{
    if (d % 2 != 0 || d < 2 || d > kImageExtent || d > extent)
        throw ShapeError("patch size " + std::to_string(d) + " must be even and in [2, " +
                         std::to_string(std::min(kImageExtent, extent)) + "]");
}

// Corner-aligned source coordinates for each output sample.
struct Taps {
    std::vector<int> lo;
    std::vector<double> frac;
};

Taps taps(int in, int out)
{
    Taps t;
    t.lo.resize(out);
    t.frac.resize(out);
    for (int i = 0; i < out; ++i) {
        const double pos = out == 1 ? 0.0 : double(i) * double(in - 1) / double(out - 1);
        int lo = std::min(int(pos), in - 1);
        t.lo[i] = lo;
        t.frac[i] = pos - lo;
    }
    return t;
}

// a + t (b - a) stays inside [min(a, b), max(a, b)] under rounding and
// returns a exactly when t == 0 or a == b.
inline double lerp(double a, double b, double t) { return t == 0.0 ? a : a + t * (b - a); }

} // namespace

std::size_t grid_count(int extent, int d, int stride)
{
    const std::size_t per_axis = std::size_t((extent - d) / stride) + 1;
    return per_axis * per_axis;
}

PatchGrid make_grid(int extent, int d, int stride, std::int64_t image_id)
{
    check_size(extent, d);
    if (stride < 1 || stride > d)
        throw ShapeError("stride " + std::to_string(stride) + " must be in [1, " + std::to_string(d) + "]");
    PatchGrid grid{extent, d, stride, {}};
    grid.refs.reserve(grid_count(extent, d, stride));
    for (int y = 0; y + d <= extent; y += stride)
        for (int x = 0; x + d <= extent; x += stride) grid.refs.push_back({x, y, d, image_id});
    return grid;
}

int train_stride(int d) { return d == 2 ? 2 : d / 2; }

Image extract(const Image& image, const PatchRef& ref)
{
    if (ref.d < 1 || ref.x < 0 || ref.y < 0 || ref.x + ref.d > image.width || ref.y + ref.d > image.height)
        throw ShapeError("patch (" + std::to_string(ref.x) + "," + std::to_string(ref.y) + ") of size " +
                         std::to_string(ref.d) + " leaves the " + std::to_string(image.width) + "x" +
                         std::to_string(image.height) + " image");
    Image out(ref.d, ref.d, image.channels);
    for (int c = 0; c < image.channels; ++c)
        for (int y = 0; y < ref.d; ++y) {
            const float* src = &image.pixels[(std::size_t(c) * image.height + ref.y + y) * image.width + ref.x];
            std::copy(src, src + ref.d, &out.at(c, y, 0));
        }
    return out;
}

Image resize_bilinear(const Image& src, int out_height, int out_width)
{
    if (src.height < 1 || src.width < 1 || out_height < 1 || out_width < 1)
        throw ShapeError("resize: empty extent");
    if (src.height == out_height && src.width == out_width) return src;
    const Taps tx = taps(src.width, out_width);
    const Taps ty = taps(src.height, out_height);

    Image out(out_height, out_width, src.channels);
    std::vector<double> rows(std::size_t(src.height) * out_width);
    for (int c = 0; c < src.channels; ++c) {
        for (int y = 0; y < src.height; ++y)
            for (int x = 0; x < out_width; ++x) {
                const int lo = tx.lo[x], hi = std::min(lo + 1, src.width - 1);
                rows[std::size_t(y) * out_width + x] = lerp(src.at(c, y, lo), src.at(c, y, hi), tx.frac[x]);
            }
        for (int y = 0; y < out_height; ++y) {
            const int lo = ty.lo[y], hi = std::min(lo + 1, src.height - 1);
            for (int x = 0; x < out_width; ++x)
                out.at(c, y, x) = float(lerp(rows[std::size_t(lo) * out_width + x],
                                             rows[std::size_t(hi) * out_width + x], ty.frac[y]));
        }
    }
    return out;
}

Image resize_bilinear(const Image& patch, int target)
{
    if (patch.height != patch.width) throw ShapeError("resize: patch must be square");
    if (patch.height < 2) throw ShapeError("resize: patch size " + std::to_string(patch.height) + " is below 2");
    return resize_bilinear(patch, target, target);
}

Image standardize(const Image& image, const PatchRef& ref) { return resize_bilinear(extract(image, ref)); }

} // namespace pbc
