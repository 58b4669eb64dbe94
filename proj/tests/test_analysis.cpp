#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "pbc/analysis.hpp"
#include "pbc/errors.hpp"
#include "pbc/layers.hpp"
#include "synthetic.hpp"

using namespace pbc;

namespace {

using ScoreFn = std::function<std::vector<double>(const Image&, const PatchRef&, int)>;

class StubScorer : public LadderScorer {
public:
    StubScorer(int classes, ScoreFn fn, std::vector<int> sizes = ladder_sizes())
        : classes_(classes), fn_(std::move(fn)), sizes_(std::move(sizes))
    {
    }
    std::vector<int> sizes() const override { return sizes_; }
    int num_classes() const override { return classes_; }
    ScoreMatrix score(const Image& image, std::span<const PatchRef> refs, int model_d) const override
    {
        ScoreMatrix m(refs.size(), std::size_t(classes_));
        for (std::size_t p = 0; p < refs.size(); ++p) {
            const auto row = fn_(image, refs[p], model_d);
            std::copy(row.begin(), row.end(), m.values.begin() + std::ptrdiff_t(p * m.cols));
        }
        m.refs.assign(refs.begin(), refs.end());
        return m;
    }

private:
    int classes_;
    ScoreFn fn_;
    std::vector<int> sizes_;
};

std::vector<double> one_hot(int classes, int cls, double value)
{
    std::vector<double> v(std::size_t(classes), 0.0);
    v[std::size_t(cls)] = value;
    return v;
}

ConfidenceCurve make_curve(std::vector<double> conf, int true_class = 0)
{
    ConfidenceCurve c;
    c.true_class = true_class;
    c.confidence = std::move(conf);
    for (std::size_t i = 0; i < c.confidence.size(); ++i) c.sizes.push_back(32 - 2 * int(i));
    c.predicted.assign(c.confidence.size(), true_class);
    return c;
}

FalseScoreTable flat_table(int classes, double value, std::vector<int> sizes = ladder_sizes())
{
    FalseScoreTable t;
    t.num_classes = classes;
    t.sizes = sizes;
    for (int d : sizes) {
        t.mean[d].assign(std::size_t(classes), value);
        t.stddev[d].assign(std::size_t(classes), 0.0);
        t.count[d].assign(std::size_t(classes), 1);
    }
    return t;
}

ConfidenceField field(int d, double fill)
{
    ConfidenceField f;
    f.d = d;
    f.positions = 32 - d + 1;
    f.values.assign(std::size_t(f.positions * f.positions), fill);
    return f;
}

const Image kGray(32, 32, 1, 0.5f);

} // namespace

TEST(Ladder, SizesDescendFrom32To2)
{
    const auto s = ladder_sizes();
    ASSERT_EQ(s.size(), 16u);
    EXPECT_EQ(s.front(), 32);
    EXPECT_EQ(s.back(), 2);
}

TEST(Curve, PerfectScorerIsFlatNearOne)
{
    const StubScorer stub(4, [](const Image&, const PatchRef&, int) { return one_hot(4, 2, 10.0); });
    const auto sizes = ladder_sizes();
    const auto curve = confidence_curve(kGray, 2, stub, AggregationKind::independent, sizes);
    ASSERT_EQ(curve.confidence.size(), 16u);
    EXPECT_FALSE(curve.partial);
    EXPECT_EQ(curve.sizes.front(), 32);
    EXPECT_EQ(curve.sizes.back(), 2);
    for (double c : curve.confidence) EXPECT_NEAR(c, std::exp(10.0) / (std::exp(10.0) + 3.0), 1e-12);
    EXPECT_NEAR(maximal_drop(curve).drop, 0.0, 1e-12);
}

TEST(Curve, StepBetweenSixteenAndFourteen)
{
    const StubScorer stub(3, [](const Image&, const PatchRef&, int d) {
        return d >= 16 ? one_hot(3, 0, 8.0) : one_hot(3, 1, 8.0);
    });
    const auto sizes = ladder_sizes();
    const auto curve = confidence_curve(kGray, 0, stub, AggregationKind::winner, sizes);
    const MaxDrop drop = maximal_drop(curve);
    EXPECT_EQ(drop.d_from, 16);
    EXPECT_EQ(drop.d_to, 14);
    EXPECT_GT(drop.drop, 0.99);
    EXPECT_EQ(curve.predicted[8], 0);
    EXPECT_EQ(curve.predicted[9], 1);
}

TEST(Curve, MissingSizeMarksPartial)
{
    const StubScorer stub(2, [](const Image&, const PatchRef&, int) { return one_hot(2, 0, 1.0); }, {32, 16});
    const std::vector<int> requested{32, 24, 16};
    const auto curve = confidence_curve(kGray, 0, stub, AggregationKind::independent, requested);
    EXPECT_TRUE(curve.partial);
    EXPECT_EQ(curve.sizes, (std::vector<int>{32, 16}));
}

TEST(MaximalDrop, Examples)
{
    EXPECT_EQ(maximal_drop(make_curve({0.5, 0.5, 0.5})).drop, 0.0);
    const auto d = maximal_drop(make_curve({1.0, 0.9, 0.2, 0.2}));
    EXPECT_NEAR(d.drop, 0.7, 1e-12);
    EXPECT_EQ(d.d_from, 30);
    EXPECT_EQ(d.d_to, 28);
    // equal drops: the larger d_i wins
    const auto tie = maximal_drop(make_curve({1.0, 0.5, 0.5, 0.0}));
    EXPECT_EQ(tie.d_from, 32);
    EXPECT_THROW(maximal_drop(make_curve({1.0})), std::invalid_argument);
}

TEST(Histograms, SingleCurveSingleBin)
{
    const std::vector<ConfidenceCurve> curves{make_curve({1.0, 0.9, 0.2, 0.2}, 1)};
    const auto h = drop_histograms(curves, 3);
    int nonzero = 0, total = 0;
    for (int n : h.drop_counts) {
        nonzero += n > 0;
        total += n;
    }
    EXPECT_EQ(nonzero, 1);
    EXPECT_EQ(total, 1);
    EXPECT_EQ(h.drop_counts[drop_bin(0.7)], 1);
    EXPECT_EQ(h.by_class[1][1][drop_bin(0.7)], 1);
}

TEST(Histograms, ConservationAndTwoClusters)
{
    std::mt19937_64 rng(7);
    std::normal_distribution<double> jitter(0.0, 0.01);
    std::vector<ConfidenceCurve> curves;
    for (int i = 0; i < 200; ++i) {
        const double drop = (i % 2 ? 0.82 : 0.12) + jitter(rng);
        std::vector<double> conf(16, 0.9);
        const std::size_t at = i % 2 ? 3 : 10;
        for (std::size_t k = at + 1; k < 16; ++k) conf[k] = 0.9 - drop;
        curves.push_back(make_curve(conf, i % 4));
    }
    const auto h = drop_histograms(curves, 4);
    int total = 0;
    for (int n : h.drop_counts) total += n;
    EXPECT_EQ(total, 200);
    int total2d = 0;
    for (const auto& per_size : h.by_class)
        for (const auto& bins : per_size)
            for (int n : bins) total2d += n;
    EXPECT_EQ(total2d, 200);
    // the two modes are the only local maxima
    std::vector<int> modes;
    for (int b = 0; b < kDropBins; ++b) {
        const int left = b > 0 ? h.drop_counts[b - 1] : 0;
        const int right = b + 1 < kDropBins ? h.drop_counts[b + 1] : 0;
        if (h.drop_counts[b] > 0 && h.drop_counts[b] >= left && h.drop_counts[b] > right) modes.push_back(b);
    }
    EXPECT_EQ(modes, (std::vector<int>{drop_bin(0.12), drop_bin(0.82)}));
    const auto pos = [&](int d) { return std::size_t(std::find(h.sizes.begin(), h.sizes.end(), d) - h.sizes.begin()); };
    int at_26 = 0, at_12 = 0;
    for (const auto& per_size : h.by_class) {
        for (int n : per_size[pos(26)]) at_26 += n;
        for (int n : per_size[pos(12)]) at_12 += n;
    }
    EXPECT_EQ(at_26, 100);
    EXPECT_EQ(at_12, 100);
}

TEST(FalseScores, ConstantModelHasZeroSpread)
{
    const StubScorer stub(3, [](const Image&, const PatchRef&, int) { return std::vector<double>(3, 1.5); },
                          {32, 16, 8});
    const auto train = fixtures::synthetic_set(3, 2, 1);
    const auto t = false_score_table(stub, train);
    EXPECT_EQ(t.sizes, (std::vector<int>{32, 16, 8}));
    for (int d : t.sizes)
        for (int c = 0; c < 3; ++c) {
            EXPECT_EQ(t.mean_at(d, c), 1.5);
            EXPECT_EQ(t.stddev.at(d)[std::size_t(c)], 0.0);
            EXPECT_EQ(t.count.at(d)[std::size_t(c)], 4);
        }
    EXPECT_THROW(t.mean_at(4, 0), std::out_of_range);
    EXPECT_THROW(t.mean_at(32, 3), std::out_of_range);
}

TEST(FalseScores, TwoImageToyByHand)
{
    FalseScoreAccumulator acc(2);
    // image of class 0: class-1 maxima over patches = 3
    acc.add(8, ScoreMatrix(2, 2, {0, 1, 5, 3}), 0);
    // image of class 1: class-0 maxima = 4
    acc.add(8, ScoreMatrix(3, 2, {4, 0, 2, 9, -1, 1}), 1);
    // another class-0 image: class-1 maxima = 7
    acc.add(8, ScoreMatrix(1, 2, {0, 7}), 0);
    const auto t = acc.finish();
    EXPECT_EQ(t.mean_at(8, 0), 4.0);
    EXPECT_EQ(t.mean_at(8, 1), 5.0);
    EXPECT_EQ(t.stddev.at(8)[1], 2.0);
    EXPECT_EQ(t.count.at(8)[0], 1);
}

TEST(FalseScores, ClassWithoutNegativesRejected)
{
    FalseScoreAccumulator acc(3);
    acc.add(8, ScoreMatrix(1, 3, {0, 1, 2}), 0);
    EXPECT_THROW(acc.finish(), std::invalid_argument);
}

TEST(LocalConfidence, SymmetryMonotonicityClosedForm)
{
    const auto t = flat_table(5, 0.7);
    EXPECT_NEAR(patch_local_confidence(0.7, 2, 8, t), 0.2, 1e-15);
    double prev = 0.0;
    for (double s = -5; s <= 5; s += 0.5) {
        const double c = patch_local_confidence(s, 1, 8, t);
        EXPECT_GT(c, prev);
        prev = c;
    }
    FalseScoreTable hand = flat_table(3, 0.0, {6});
    hand.mean[6] = {1.0, 0.0, 2.0};
    const double expected = std::exp(0.5) / (std::exp(1.0) + std::exp(0.5) + std::exp(2.0));
    EXPECT_NEAR(patch_local_confidence(0.5, 1, 6, hand), expected, 1e-15);
    EXPECT_THROW(patch_local_confidence(0.5, 1, 8, hand), std::out_of_range);
    EXPECT_THROW(patch_local_confidence(0.5, 3, 6, hand), std::out_of_range);
}

TEST(LocalConfidence, ScorerOverload)
{
    const StubScorer stub(2, [](const Image&, const PatchRef& r, int d) { return std::vector<double>{double(d), double(r.x)}; });
    const auto t = flat_table(2, 0.0);
    EXPECT_NEAR(patch_local_confidence(stub, kGray, PatchRef{3, 0, 4}, 1, t),
                1.0 / (1.0 + std::exp(-3.0)), 1e-15);
}

TEST(Mrp, CorrectOnlyAtFullSize)
{
    const StubScorer stub(2, [](const Image&, const PatchRef&, int d) { return d == 32 ? one_hot(2, 1, 3) : one_hot(2, 0, 3); });
    const auto sizes = ladder_sizes();
    const auto rec = find_mrp(ladder_scores(stub, kGray, sizes), 1, AggregationKind::independent, 4);
    ASSERT_TRUE(rec);
    EXPECT_EQ(rec->d_star, 32);
    EXPECT_EQ(rec->patch.x, 0);
    EXPECT_EQ(rec->patch.y, 0);
    EXPECT_EQ(rec->patch.d, 32);
    EXPECT_TRUE(rec->coincides_with_max_drop);
    EXPECT_TRUE(rec->monotone_above);
    EXPECT_EQ(rec->image_id, 4);
}

TEST(Mrp, CorrectEverywhereGivesSmallestSize)
{
    // the true class peaks at the patch at (7, 3)
    const StubScorer stub(2, [](const Image&, const PatchRef& r, int) {
        return std::vector<double>{r.x == 7 && r.y == 3 ? 5.0 : 1.0, 0.0};
    });
    const auto sizes = ladder_sizes();
    const auto rec = find_mrp(ladder_scores(stub, kGray, sizes), 0, AggregationKind::winner);
    ASSERT_TRUE(rec);
    EXPECT_EQ(rec->d_star, 2);
    EXPECT_EQ(rec->patch.x, 7);
    EXPECT_EQ(rec->patch.y, 3);
    EXPECT_EQ(rec->score, 5.0);
}

TEST(Mrp, MinimumCorrectSizeEvenWithGaps)
{
    const StubScorer stub(2, [](const Image&, const PatchRef&, int d) {
        return d == 32 || d == 10 ? one_hot(2, 0, 2) : one_hot(2, 1, 2);
    });
    const auto sizes = ladder_sizes();
    const auto rec = find_mrp(ladder_scores(stub, kGray, sizes), 0, AggregationKind::independent);
    ASSERT_TRUE(rec);
    EXPECT_EQ(rec->d_star, 10);
    EXPECT_FALSE(rec->monotone_above);
}

TEST(Mrp, WrongEverywhereIsAbsent)
{
    const StubScorer stub(2, [](const Image&, const PatchRef&, int) { return one_hot(2, 1, 2); }, {32, 16});
    const std::vector<int> sizes{32, 16};
    EXPECT_FALSE(find_mrp(ladder_scores(stub, kGray, sizes), 0, AggregationKind::independent));
}

TEST(Cmirc, ConstructedInstanceFound)
{
    const double q = 0.5;
    std::map<int, ConfidenceField, std::greater<int>> fields;
    fields.emplace(10, field(10, 0.1));
    fields.emplace(8, field(8, q - 0.2));
    auto& parent = fields.at(10);
    parent.values[std::size_t(4 * parent.positions + 6)] = q + 0.2; // (x=6, y=4)
    const auto found = find_cmircs_in_fields(fields, q, 3);
    ASSERT_EQ(found.size(), 1u);
    EXPECT_EQ(found[0].patch.x, 6);
    EXPECT_EQ(found[0].patch.y, 4);
    EXPECT_EQ(found[0].patch.d, 10);
    EXPECT_NEAR(found[0].drop, 0.4, 1e-12);
    EXPECT_EQ(found[0].image_id, 3);

    // one of the nine sub-patches exceeds q: no longer minimal
    auto& sub = fields.at(8);
    sub.values[std::size_t((4 + 2) * sub.positions + 6 + 1)] = q + 0.01;
    EXPECT_TRUE(find_cmircs_in_fields(fields, q).empty());
}

TEST(Cmirc, RejectsBadThreshold)
{
    std::map<int, ConfidenceField, std::greater<int>> fields;
    EXPECT_THROW(find_cmircs_in_fields(fields, 0.0), std::invalid_argument);
    EXPECT_THROW(find_cmircs_in_fields(fields, 1.0), std::invalid_argument);
}

TEST(Cmirc, ScorerPathMatchesBruteForce)
{
    // score for class 0 is high only where the patch covers pixel (20, 11) with
    // room to spare, so sub-patches lose it near the edges
    const StubScorer stub(
        2,
        [](const Image&, const PatchRef& r, int) {
            const bool covers = r.x <= 19 && r.x + r.d >= 22 && r.y <= 10 && r.y + r.d >= 13;
            return std::vector<double>{covers ? 2.0 : -2.0, 0.0};
        },
        {8, 6, 4, 2});
    const auto t = flat_table(2, 0.0, {8, 6, 4, 2});
    const double q = 0.5;
    const auto found = find_cmircs(kGray, 0, stub, t, q);
    ASSERT_FALSE(found.empty());
    for (const auto& rec : found) {
        const PatchRef& p = rec.patch;
        EXPECT_GE(patch_local_confidence(stub, kGray, p, 0, t), q);
        for (int oy = 0; oy <= 2; ++oy)
            for (int ox = 0; ox <= 2; ++ox)
                EXPECT_LT(patch_local_confidence(stub, kGray, PatchRef{p.x + ox, p.y + oy, p.d - 2}, 0, t), q);
    }
    // d = 4 patches covering the 3x3 target exist only at x = 19, y = 10
    const auto dedup = dedup_cmircs(found);
    EXPECT_LE(dedup.size(), found.size());
}

TEST(Cmirc, DedupExamples)
{
    const CMircRecord a{0, {5, 5, 8}, 0.8, 0.1, 0.7};
    const CMircRecord b{0, {6, 5, 8}, 0.9, 0.1, 0.8};
    const CMircRecord far{0, {8, 5, 8}, 0.7, 0.1, 0.6};
    const CMircRecord other_size{0, {6, 5, 6}, 0.7, 0.1, 0.6};
    const std::vector<CMircRecord> ab{a, b}, ba{b, a}, afar{a, far}, mixed{a, other_size};
    ASSERT_EQ(dedup_cmircs(ab).size(), 1u);
    EXPECT_EQ(dedup_cmircs(ab)[0].patch.x, 6);
    EXPECT_EQ(dedup_cmircs(ba)[0].patch.x, 6);
    EXPECT_EQ(dedup_cmircs(afar).size(), 2u);
    EXPECT_EQ(dedup_cmircs(mixed).size(), 2u);
}

TEST(Cmirc, DedupIsOrderInvariantOnChains)
{
    std::vector<CMircRecord> chain;
    for (int x = 0; x < 6; ++x) chain.push_back({0, {x, 2, 6}, 0.5 + 0.01 * x, 0.1, 0.4});
    chain.push_back({0, {20, 20, 6}, 0.6, 0.1, 0.5});
    const auto first = dedup_cmircs(chain);
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 10; ++trial) {
        std::shuffle(chain.begin(), chain.end(), rng);
        const auto again = dedup_cmircs(chain);
        ASSERT_EQ(again.size(), 2u);
        for (std::size_t i = 0; i < first.size(); ++i) EXPECT_EQ(again[i].patch, first[i].patch);
    }
    EXPECT_EQ(first[0].patch.x, 5);
}

TEST(ExternalMirc, ConstantGrayHasNoDrop)
{
    const StubScorer stub(3, [](const Image& img, const PatchRef& r, int d) {
        const Image p = standardize(img, r);
        double mean = 0.0;
        for (float v : p.pixels) mean += v;
        mean /= double(p.size());
        return std::vector<double>{mean * 4.0, 1.0, 0.02 * d};
    });
    const FalseScoreTable t = flat_table(3, 1.0);
    const auto r = evaluate_external_mirc(Image(12, 9, 1, 0.5f), 0, stub, t);
    EXPECT_EQ(r.sub_patches.size(), 49u);
    EXPECT_EQ(r.sizes.size(), 16u);
    for (double d : r.drop) EXPECT_NEAR(d, 0.0, 1e-6);
    EXPECT_LT(std::abs(r.max_drop), 0.05);
    EXPECT_THROW(evaluate_external_mirc(Image(1, 5, 1), 0, stub, t), ShapeError);
}

TEST(Accuracy, FullSizeColumnEqualsWholeImageAccuracy)
{
    const StubScorer stub(3, [](const Image& img, const PatchRef&, int) {
        return one_hot(3, img.pixels[0] > 0.5f ? 1 : 0, 1.0);
    }, {32, 2});
    std::vector<LabeledImage> set;
    for (int i = 0; i < 6; ++i) set.push_back({Image(32, 32, 1, i % 2 ? 0.9f : 0.1f), i % 3, {}});
    const auto table = accuracy_vs_size(stub, set, AggregationKind::independent);
    ASSERT_EQ(table.sizes.front(), 32);
    int correct = 0;
    for (const auto& s : set) correct += (s.image.pixels[0] > 0.5f ? 1 : 0) == s.label;
    EXPECT_DOUBLE_EQ(table.mean[0], double(correct) / 6.0);
}

TEST(Accuracy, RandomScorerIsNearChance)
{
    const StubScorer stub(5, [](const Image& img, const PatchRef& r, int d) {
        std::mt19937_64 rng(std::uint64_t(img.pixels[0] * 1e6) * 131 + std::uint64_t(r.x * 7 + r.y * 1000 + d));
        std::uniform_real_distribution<double> u(0, 1);
        std::vector<double> v(5);
        for (auto& x : v) x = u(rng);
        return v;
    }, {32, 24, 16});
    std::vector<LabeledImage> set;
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> u(0, 1);
    for (int i = 0; i < 1000; ++i) set.push_back({Image(32, 32, 1, u(rng)), i % 5, {}});
    const auto table = accuracy_vs_size(stub, set, AggregationKind::winner, 2);
    for (double acc : table.mean) EXPECT_NEAR(acc, 0.2, 0.04);
    ASSERT_EQ(table.per_class.size(), 3u);
    EXPECT_EQ(table.per_class[0].size(), 5u);
}
