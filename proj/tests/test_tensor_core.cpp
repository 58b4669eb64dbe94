#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pbc/errors.hpp"
#include "pbc/gradcheck.hpp"
#include "pbc/layers.hpp"
#include "pbc/optim.hpp"

using namespace pbc;

namespace {

BasicTensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0)
{
    std::uniform_real_distribution<double> u(lo, hi);
    BasicTensor<double> t(shape);
    for (auto& v : t.values()) v = u(rng);
    return t;
}

void randomize(BasicLayer<double>& layer, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto* t : {&layer.weight, &layer.bias, &layer.shift})
        for (auto& v : t->values()) v = u(rng);
    for (auto& v : layer.scale.values()) v = 0.5 + 0.5 * (u(rng) + 1.0);
}

} // namespace

TEST(Tensor, ShapeAndGradInvariants)
{
    Tensor t({2, 3});
    EXPECT_EQ(t.size(), 6u);
    EXPECT_FALSE(t.has_grad());
    EXPECT_EQ(t.grad().size(), t.size());
    EXPECT_THROW(Tensor({1, 1, 1, 1, 1}), ShapeError);
    EXPECT_THROW(Tensor({2, 2}, std::vector<float>(3)), ShapeError);
    EXPECT_THROW(t.reshape({4, 2}), ShapeError);
    t.reshape({3, 2});
    EXPECT_EQ(t.extent(0), 3u);
}

TEST(Forward, ConvArithmetic)
{
    const auto spec = LayerSpec::conv(1, 2, 3, 1, Padding::valid);
    EXPECT_EQ(output_shape(spec, {1, 1, 6, 6}), (Shape{1, 2, 4, 4}));
    EXPECT_EQ(output_extent(32, 3, 2, Padding::same), 16);
    EXPECT_EQ(output_extent(7, 3, 2, Padding::valid), 3);
    Tensor out = apply(make_layer<float>(spec), Tensor({1, 1, 6, 6}, 1.0f), Mode::eval);
    EXPECT_EQ(out.shape(), (Shape{1, 2, 4, 4}));
}

TEST(Forward, ShapeMismatchNamesLayerAndExtents)
{
    const auto spec = LayerSpec::conv(3, 2, 3, 1, Padding::valid);
    try {
        apply(make_layer<float>(spec), Tensor({1, 1, 6, 6}), Mode::eval, nullptr, 4);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string what = e.what();
        EXPECT_NE(what.find("layer 4"), std::string::npos) << what;
        EXPECT_NE(what.find('1'), std::string::npos) << what;
    }
    EXPECT_THROW(apply(make_layer<float>(LayerSpec::conv(1, 1, 5, 1, Padding::valid)), Tensor({1, 1, 4, 4}), Mode::eval),
                 ShapeError);
}

TEST(Forward, Relu)
{
    Tensor x({1, 3, 1, 1}, std::vector<float>{-1.0f, 0.0f, 2.0f});
    Tensor y = apply(make_layer<float>(LayerSpec::relu(3)), x, Mode::eval);
    EXPECT_EQ(y.storage(), (std::vector<float>{0.0f, 0.0f, 2.0f}));
}

TEST(Forward, BatchNormEvalIdentity)
{
    std::mt19937_64 rng(3);
    auto x = random_tensor({2, 3, 4, 4}, rng, -5, 5).cast<float>();
    Tensor y = apply(make_layer<float>(LayerSpec::batch_norm(3)), x, Mode::eval);
    const double factor = 1.0 / std::sqrt(1.0 + kBatchNormEpsilon);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i] * factor, 1e-6);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-4 * std::abs(x[i]) + 1e-7);
}

TEST(Forward, BatchNormTrainUpdatesRunningStats)
{
    auto layer = make_layer<double>(LayerSpec::batch_norm(1));
    BasicTensor<double> x({4, 1, 1, 1}, std::vector<double>{1, 2, 3, 4});
    auto y = forward(layer, x, Mode::train);
    // biased variance 1.25 normalizes; running stats use momentum 0.9 and unbiased variance 5/3
    EXPECT_NEAR(y[0], (1 - 2.5) / std::sqrt(1.25 + kBatchNormEpsilon), 1e-12);
    EXPECT_NEAR(layer.running_mean[0], 0.1 * 2.5, 1e-12);
    EXPECT_NEAR(layer.running_var[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-12);
}

TEST(Forward, PoolStatsMatchesUnion)
{
    std::mt19937_64 rng(5);
    auto x = random_tensor({6, 2, 3, 3}, rng);
    auto layer = make_layer<double>(LayerSpec::batch_norm(2));
    BatchStats whole, a, b;
    apply(layer, x, Mode::train, &whole);
    BasicTensor<double> xa({2, 2, 3, 3}, std::vector<double>(x.data(), x.data() + 36));
    BasicTensor<double> xb({4, 2, 3, 3}, std::vector<double>(x.data() + 36, x.data() + 108));
    apply(layer, xa, Mode::train, &a);
    apply(layer, xb, Mode::train, &b);
    const std::vector<BatchStats> parts{a, b};
    const BatchStats pooled = pool_stats(parts);
    EXPECT_EQ(pooled.count, whole.count);
    for (int c = 0; c < 2; ++c) {
        EXPECT_NEAR(pooled.mean[c], whole.mean[c], 1e-12);
        EXPECT_NEAR(pooled.var[c], whole.var[c], 1e-12);
    }
}

TEST(Forward, EvalIsDeterministic)
{
    std::mt19937_64 rng(9);
    auto layer = make_layer<float>(LayerSpec::conv(2, 3, 3, 2, Padding::same, true));
    for (auto& v : layer.weight.values()) v = float(std::uniform_real_distribution<double>(-1, 1)(rng));
    auto x = random_tensor({3, 2, 7, 7}, rng).cast<float>();
    EXPECT_EQ(apply(layer, x, Mode::eval), apply(layer, x, Mode::eval));
}

TEST(Backward, ReluSubgradient)
{
    BasicTensor<double> x({1, 2, 1, 1}, std::vector<double>{-1, 2});
    BasicTensor<double> up({1, 2, 1, 1}, std::vector<double>{5, 5});
    auto g = backward(make_layer<double>(LayerSpec::relu(2)), x, up, Mode::eval);
    EXPECT_EQ(g.input.storage(), (std::vector<double>{0, 5}));
}

TEST(Backward, ConvWeightGradIsReceptiveFieldSum)
{
    std::mt19937_64 rng(11);
    auto layer = make_layer<double>(LayerSpec::conv(1, 1, 2, 1, Padding::valid));
    for (auto& v : layer.weight.values()) v = 1.0;
    auto x = random_tensor({1, 1, 3, 3}, rng);
    BasicTensor<double> up({1, 1, 2, 2}, 1.0);
    auto g = backward(layer, x, up, Mode::eval);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            double expected = 0.0;
            for (int oy = 0; oy < 2; ++oy)
                for (int ox = 0; ox < 2; ++ox) expected += x[(oy + i) * 3 + (ox + j)];
            EXPECT_NEAR(g.weight[i * 2 + j], expected, 1e-12);
        }
    const Fragment fragment{layer};
    const auto report = finite_difference_check(fragment, x, Mode::eval, 1e-6);
    EXPECT_TRUE(report.passed) << report.worst;
}

TEST(Backward, BatchNormTwoSampleFiniteDifferences)
{
    std::mt19937_64 rng(13);
    auto layer = make_layer<double>(LayerSpec::batch_norm(2));
    randomize(layer, rng);
    auto x = random_tensor({2, 2, 2, 2}, rng);
    const auto report = finite_difference_check(Fragment{layer}, x, Mode::train, 1e-4);
    EXPECT_TRUE(report.passed) << report.max_relative_error << " " << report.worst;
    const auto eval = finite_difference_check(Fragment{layer}, x, Mode::eval, 1e-4);
    EXPECT_TRUE(eval.passed) << eval.worst;
}

TEST(Backward, UpstreamShapeMismatchRejected)
{
    auto layer = make_layer<double>(LayerSpec::conv(1, 1, 3, 1, Padding::valid));
    EXPECT_THROW(backward(layer, BasicTensor<double>({1, 1, 6, 6}), BasicTensor<double>({1, 1, 3, 3}), Mode::eval),
                 ShapeError);
}

TEST(Backward, WorkerCountDoesNotChangeGradients)
{
    std::mt19937_64 rng(17);
    auto layer = make_layer<float>(LayerSpec::conv(3, 4, 3, 1, Padding::same, true));
    for (auto& v : layer.weight.values()) v = float(std::uniform_real_distribution<double>(-1, 1)(rng));
    auto x = random_tensor({37, 3, 8, 8}, rng).cast<float>();
    auto up = random_tensor({37, 4, 8, 8}, rng).cast<float>();
    auto g1 = backward(layer, x, up, Mode::eval, 0, 1);
    auto g3 = backward(layer, x, up, Mode::eval, 0, 3);
    EXPECT_EQ(g1.weight, g3.weight);
    EXPECT_EQ(g1.bias, g3.bias);
    EXPECT_EQ(g1.input, g3.input);
}

TEST(Softmax, Examples)
{
    auto p = softmax(std::vector<double>{0, 0});
    EXPECT_DOUBLE_EQ(p[0], 0.5);
    EXPECT_DOUBLE_EQ(p[1], 0.5);
    p = softmax(std::vector<double>{1000, 1000});
    EXPECT_DOUBLE_EQ(p[0], 0.5);
    p = softmax(std::vector<double>{2, 0, 0});
    const long double e2 = std::exp(2.0L);
    EXPECT_NEAR(p[0], double(e2 / (e2 + 2.0L)), 1e-15);
    EXPECT_NEAR(p[1], double(1.0L / (e2 + 2.0L)), 1e-15);
    EXPECT_THROW(softmax(std::vector<double>{1}), std::invalid_argument);
    EXPECT_THROW(softmax(std::vector<double>{1, NAN}), std::invalid_argument);
    EXPECT_THROW(softmax(std::vector<double>{1, INFINITY}), std::invalid_argument);
}

TEST(Softmax, SumsToOneAndPreservesArgmax)
{
    std::mt19937_64 rng(19);
    std::uniform_real_distribution<double> u(-50, 50);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<double> s(2 + trial % 9);
        for (auto& v : s) v = u(rng);
        const auto p = softmax(s);
        double sum = 0.0;
        for (double v : p) {
            EXPECT_GT(v, 0.0 - 1e-300);
            sum += v;
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
        EXPECT_EQ(std::max_element(s.begin(), s.end()) - s.begin(), std::max_element(p.begin(), p.end()) - p.begin());
    }
}

TEST(CrossEntropy, Examples)
{
    EXPECT_DOUBLE_EQ(cross_entropy(std::vector<double>{1.0, 0.0}, 0), 0.0);
    EXPECT_NEAR(cross_entropy(std::vector<double>{0.5, 0.5}, 0), 0.6931471805599453, 1e-15);
    EXPECT_DOUBLE_EQ(cross_entropy(std::vector<double>{1.0, 0.0}, 1), -std::log(kProbabilityFloor));
    EXPECT_THROW(cross_entropy(std::vector<double>{0.5, 0.5}, 2), std::out_of_range);
}

TEST(Adam, ZeroGradientIsFixedPoint)
{
    std::vector<float> w{0.25f, -1.5f, 3.0f}, g(3, 0.0f);
    const auto before = w;
    std::vector<ParamBlock> blocks{{w, g, true}};
    AdamState state;
    EXPECT_TRUE(adam_update(blocks, state, 1, 1e-3, 0.0).applied);
    EXPECT_EQ(w, before);
}

TEST(Adam, RidgeTermShrinksWeight)
{
    std::vector<float> w{1.0f}, g{0.0f};
    std::vector<ParamBlock> blocks{{w, g, true}};
    AdamState state;
    adam_update(blocks, state, 1, 1e-3, 1e-4);
    EXPECT_LT(w[0], 1.0f);
    // first moment holds (1 - beta1) * 2e-4
    EXPECT_NEAR(state.slots[0].m[0], 0.1 * 2e-4, 1e-10);

    std::vector<float> s{1.0f}, gs{0.0f};
    std::vector<ParamBlock> scale{{s, gs, false}};
    AdamState state2;
    adam_update(scale, state2, 1, 1e-3, 1e-4);
    EXPECT_EQ(s[0], 1.0f);
}

TEST(Adam, OneStepHandEvaluation)
{
    std::vector<float> w{0.0f}, g{1.0f};
    std::vector<ParamBlock> blocks{{w, g, true}};
    AdamState state;
    adam_update(blocks, state, 1, 1e-3, 0.0);
    // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    EXPECT_NEAR(w[0], -1e-3 / (1.0 + 1e-8), 1e-9);
}

TEST(Adam, NonFiniteGradientRejectsStep)
{
    std::vector<float> w{1.0f, 2.0f}, g{0.5f, NAN};
    std::vector<ParamBlock> blocks{{w, g, true}};
    AdamState state;
    const auto result = adam_update(blocks, state, 1, 1e-3, 0.0);
    EXPECT_FALSE(result.applied);
    EXPECT_FALSE(result.reason.empty());
    EXPECT_EQ(w, (std::vector<float>{1.0f, 2.0f}));
}

TEST(GradCheck, LinearLayerIsExact)
{
    std::mt19937_64 rng(23);
    auto layer = make_layer<double>(LayerSpec::conv(2, 3, 1, 1, Padding::valid, true));
    randomize(layer, rng);
    const auto report = finite_difference_check(Fragment{layer}, random_tensor({2, 2, 3, 3}, rng), Mode::eval, 1e-6);
    EXPECT_TRUE(report.passed) << report.max_relative_error;
    EXPECT_LT(report.max_relative_error, 1e-6);
}

TEST(GradCheck, ConvReluFragment)
{
    std::mt19937_64 rng(29);
    auto conv = make_layer<double>(LayerSpec::conv(1, 2, 3, 1, Padding::same));
    randomize(conv, rng);
    const Fragment fragment{conv, make_layer<double>(LayerSpec::relu(2))};
    const auto report = finite_difference_check(fragment, random_tensor({1, 1, 5, 5}, rng), Mode::eval, 1e-3);
    EXPECT_TRUE(report.passed) << report.worst;
}

TEST(GradCheck, CorruptedGradientFails)
{
    std::mt19937_64 rng(31);
    auto conv = make_layer<double>(LayerSpec::conv(1, 2, 3, 1, Padding::valid));
    randomize(conv, rng);
    const auto report = finite_difference_check(Fragment{conv}, random_tensor({1, 1, 5, 5}, rng), Mode::eval, 1e-3,
                                                1e-5, 1, [](FragmentGradients& g) { g.layers[0].weight[3] += 0.5; });
    EXPECT_FALSE(report.passed);
    EXPECT_NE(report.worst.find("weight"), std::string::npos);
}

TEST(GradCheck, RejectsLargeFragments)
{
    const Fragment fragment{make_layer<double>(LayerSpec::conv(64, 64, 3, 1, Padding::same))};
    EXPECT_THROW(finite_difference_check(fragment, BasicTensor<double>({1, 64, 3, 3}), Mode::eval, 1e-3),
                 std::invalid_argument);
}

TEST(LayerSpec, ValidationRejectsMalformedSpecs)
{
    EXPECT_THROW(validate(LayerSpec::conv(1, 1, 0, 1, Padding::valid), 2), ConfigError);
    EXPECT_THROW(validate(LayerSpec::conv(1, 1, 3, 0, Padding::valid), 2), ConfigError);
    EXPECT_THROW(validate(LayerSpec::conv(0, 1, 3, 1, Padding::valid), 2), ConfigError);
    EXPECT_NO_THROW(validate(LayerSpec::batch_norm(4), 0));
}
