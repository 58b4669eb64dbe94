#pragma once

#include <cstddef>
#include <vector>

namespace pbc {

// Channel-planar intensity grid, values nominally in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> pixels; // [channel][row][column]

    Image() = default;
    Image(int h, int w, int c, float fill = 0.0f);
    Image(int h, int w, int c, std::vector<float> values);

    float& at(int c, int y, int x) { return pixels[(std::size_t(c) * height + y) * width + x]; }
    float at(int c, int y, int x) const { return pixels[(std::size_t(c) * height + y) * width + x]; }
    std::size_t size() const { return pixels.size(); }

    friend bool operator==(const Image&, const Image&) = default;
};

} // namespace pbc
