#include "pbc/image.hpp"

#include <string>

#include "pbc/errors.hpp"

namespace pbc {

Image::Image(int h, int w, int c, float fill)
    : height(h), width(w), channels(c), pixels(std::size_t(h) * w * c, fill)
{
    if (h < 0 || w < 0 || c < 0) throw ShapeError("image: negative extent");
}

Image::Image(int h, int w, int c, std::vector<float> values)
    : height(h), width(w), channels(c), pixels(std::move(values))
{
    if (h < 0 || w < 0 || c < 0) throw ShapeError("image: negative extent");
    if (pixels.size() != std::size_t(h) * w * c)
        throw ShapeError("image: " + std::to_string(pixels.size()) + " values for " + std::to_string(h) + "x" +
                         std::to_string(w) + "x" + std::to_string(c));
}

} // namespace pbc
