#include <gtest/gtest.h>

#include <random>
#include <set>

#include "pbc/errors.hpp"
#include "pbc/patching.hpp"

using namespace pbc;

namespace {

Image ramp_image(int channels = 1)
{
    Image img(32, 32, channels);
    for (int c = 0; c < channels; ++c)
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) img.at(c, y, x) = float(c * 1024 + y * 32 + x) / 4096.0f;
    return img;
}

} // namespace

TEST(Grid, Examples)
{
    EXPECT_EQ(make_grid(32, 32, 16).refs.size(), 1u);
    const auto g = make_grid(32, 16, 8);
    ASSERT_EQ(g.refs.size(), 9u);
    std::set<int> xs, ys;
    for (const auto& r : g.refs) {
        xs.insert(r.x);
        ys.insert(r.y);
    }
    EXPECT_EQ(xs, (std::set<int>{0, 8, 16}));
    EXPECT_EQ(ys, (std::set<int>{0, 8, 16}));
    EXPECT_EQ(make_grid(32, 16, 1).refs.size(), 289u);
    EXPECT_EQ(grid_count(32, 2, 2), 256u);
}

TEST(Grid, RowMajorOrder)
{
    const auto g = make_grid(32, 28, 2);
    ASSERT_EQ(g.refs.size(), 9u);
    EXPECT_EQ(g.refs[1].x, 2);
    EXPECT_EQ(g.refs[1].y, 0);
    EXPECT_EQ(g.refs[3].x, 0);
    EXPECT_EQ(g.refs[3].y, 2);
}

TEST(Grid, CountMatchesEnumerationForLadder)
{
    for (int d = 2; d <= 32; d += 2)
        for (int s = 1; s <= d; ++s) {
            std::size_t n = 0;
            for (int y = 0; y + d <= 32; y += s)
                for (int x = 0; x + d <= 32; x += s) ++n;
            EXPECT_EQ(grid_count(32, d, s), n) << d << "," << s;
            EXPECT_EQ(make_grid(32, d, s).refs.size(), n);
        }
}

TEST(Grid, RejectsBadArguments)
{
    EXPECT_THROW(make_grid(32, 3, 1), std::invalid_argument);
    EXPECT_THROW(make_grid(32, 0, 1), std::invalid_argument);
    EXPECT_THROW(make_grid(32, 34, 1), std::invalid_argument);
    EXPECT_THROW(make_grid(32, 8, 0), std::invalid_argument);
    EXPECT_THROW(make_grid(32, 8, 9), std::invalid_argument);
}

TEST(Grid, TrainStrideRule)
{
    EXPECT_EQ(train_stride(2), 2);
    EXPECT_EQ(train_stride(4), 2);
    EXPECT_EQ(train_stride(16), 8);
    EXPECT_EQ(train_stride(32), 16);
}

TEST(Grid, StrideOneCoversEveryPixel)
{
    for (int d = 2; d <= 32; d += 2) {
        std::vector<int> hits(32 * 32, 0);
        for (const auto& r : make_grid(32, d, 1).refs)
            for (int y = r.y; y < r.y + d; ++y)
                for (int x = r.x; x < r.x + d; ++x) hits[y * 32 + x] = 1;
        for (int h : hits) ASSERT_EQ(h, 1) << d;
    }
}

TEST(Extract, Examples)
{
    const Image img = ramp_image();
    EXPECT_EQ(extract(img, {0, 0, 32}), img);
    const Image corner = extract(img, {0, 0, 2});
    EXPECT_EQ(corner.pixels, (std::vector<float>{img.at(0, 0, 0), img.at(0, 0, 1), img.at(0, 1, 0), img.at(0, 1, 1)}));
    const Image a = extract(img, {4, 6, 8}), b = extract(img, {6, 7, 8});
    // pixel (x=7, y=8) appears in both
    EXPECT_EQ(a.at(0, 2, 3), b.at(0, 1, 1));
    EXPECT_THROW(extract(img, {30, 0, 4}), ShapeError);
    EXPECT_THROW(extract(img, {-1, 0, 4}), ShapeError);
}

TEST(Resize, IdentityAtFullSize)
{
    const Image img = ramp_image(3);
    EXPECT_EQ(resize_bilinear(img), img);
}

TEST(Resize, ConstantStaysConstant)
{
    for (int d = 2; d <= 32; d += 2) {
        const Image out = resize_bilinear(Image(d, d, 1, 0.3f));
        for (float v : out.pixels) ASSERT_EQ(v, 0.3f) << d;
    }
}

TEST(Resize, TwoByTwoRampClosedForm)
{
    const Image patch(2, 2, 1, std::vector<float>{0, 1, 0, 1});
    const Image out = resize_bilinear(patch);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) EXPECT_NEAR(out.at(0, y, x), double(x) / 31.0, 1e-6) << x << "," << y;
}

TEST(Resize, MonotoneBounds)
{
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const int d = 2 + 2 * (trial % 16);
        std::uniform_real_distribution<float> u(0.2f, 0.7f);
        Image patch(d, d, 1);
        for (auto& v : patch.pixels) v = u(rng);
        const auto [lo, hi] = std::minmax_element(patch.pixels.begin(), patch.pixels.end());
        for (float v : resize_bilinear(patch).pixels) {
            ASSERT_GE(v, *lo);
            ASSERT_LE(v, *hi);
        }
    }
}

TEST(Resize, RejectsTinyOrNonSquare)
{
    EXPECT_THROW(resize_bilinear(Image(1, 1, 1)), std::invalid_argument);
    EXPECT_THROW(resize_bilinear(Image(4, 6, 1)), std::invalid_argument);
}

TEST(Resize, GeneralExtentsForExternalInputs)
{
    const Image src(3, 5, 1, std::vector<float>{0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 0, 1, 2, 3, 4});
    const Image out = resize_bilinear(src, 32, 32);
    EXPECT_EQ(out.height, 32);
    EXPECT_FLOAT_EQ(out.at(0, 0, 0), 0.0f);
    EXPECT_FLOAT_EQ(out.at(0, 31, 31), 4.0f);
}

TEST(Standardize, ProducesNetworkInput)
{
    const Image img = ramp_image();
    const Image p = standardize(img, {3, 5, 8});
    EXPECT_EQ(p.height, 32);
    EXPECT_EQ(p.width, 32);
    EXPECT_FLOAT_EQ(p.at(0, 0, 0), img.at(0, 5, 3));
    EXPECT_FLOAT_EQ(p.at(0, 31, 31), img.at(0, 12, 10));
}
