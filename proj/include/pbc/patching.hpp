#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "pbc/image.hpp"

namespace pbc {

inline constexpr int kImageExtent = 32;
inline constexpr int kStandardExtent = 32;

struct PatchRef {
    int x = 0; // left column
    int y = 0; // top row
    int d = 0; // side length
    std::int64_t image_id = -1;

    friend bool operator==(const PatchRef&, const PatchRef&) = default;
};

struct PatchGrid {
    int extent = kImageExtent;
    int d = 0;
    int stride = 1;
    std::vector<PatchRef> refs; // row-major: y outer, x inner
};

// (floor((extent - d) / stride) + 1)^2
std::size_t grid_count(int extent, int d, int stride);

// Rejects odd d, d outside [2, min(32, extent)], and stride outside [1, d].
PatchGrid make_grid(int extent, int d, int stride, std::int64_t image_id = -1);

// Training stride: d / 2, except 2 for the 2x2 patch size.
int train_stride(int d);

// Exact pixel copy; throws ShapeError when the ref leaves the image.
Image extract(const Image& image, const PatchRef& ref);

// Separable bilinear resampling with corner-aligned sample positions.
// Identity when the extents already match.
Image resize_bilinear(const Image& src, int out_height, int out_width);

// Square patch to a target x target grid; rejects patches smaller than 2x2.
Image resize_bilinear(const Image& patch, int target = kStandardExtent);

// extract followed by resize to the standardized network input.
Image standardize(const Image& image, const PatchRef& ref);

} // namespace pbc
