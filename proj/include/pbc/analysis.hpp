#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "pbc/aggregation.hpp"
#include "pbc/dataset.hpp"
#include "pbc/spn.hpp"

namespace pbc {

// 32, 30, ..., 2
std::vector<int> ladder_sizes();

// Per-size patch scorer; lets the analyses run on trained models or stubs.
class LadderScorer {
public:
    virtual ~LadderScorer() = default;
    virtual std::vector<int> sizes() const = 0; // descending
    virtual int num_classes() const = 0;
    // Scores each ref's patch (extracted, resized to 32x32) with the model
    // for `model_d`. Rows follow `refs`, which are copied into the result.
    virtual ScoreMatrix score(const Image& image, std::span<const PatchRef> refs, int model_d) const = 0;

    bool has_size(int d) const;
};

class SpnLadder : public LadderScorer {
public:
    explicit SpnLadder(std::size_t workers = 1) : workers_(workers) {}

    void add(SpnModel model);
    const SpnModel& model(int d) const;

    std::vector<int> sizes() const override;
    int num_classes() const override;
    ScoreMatrix score(const Image& image, std::span<const PatchRef> refs, int model_d) const override;

private:
    std::map<int, SpnModel, std::greater<int>> models_;
    std::size_t workers_;
};

// Every stride-1 patch of size d scored by the size-d model.
ScoreMatrix score_grid(const LadderScorer& scorer, const Image& image, int d, int stride = 1);

using LadderScores = std::map<int, ScoreMatrix, std::greater<int>>;

// Stride-1 score matrices for each requested size the scorer has.
LadderScores ladder_scores(const LadderScorer& scorer, const Image& image, std::span<const int> sizes);

struct ConfidenceCurve {
    std::int64_t image_id = -1;
    int true_class = 0;
    std::vector<int> sizes; // decreasing
    std::vector<double> confidence;
    std::vector<int> predicted;
    bool partial = false; // some requested size had no model
};

ConfidenceCurve confidence_curve(const LadderScores& scores, int true_class, AggregationKind kind,
                                 std::span<const int> requested, std::int64_t image_id = -1);
ConfidenceCurve confidence_curve(const Image& image, int true_class, const LadderScorer& scorer, AggregationKind kind,
                                 std::span<const int> requested, std::int64_t image_id = -1);

struct MaxDrop {
    double drop = 0.0;
    int d_from = 0; // d_i
    int d_to = 0;   // d_{i+1}
};

// Largest conf(d_i) - conf(d_{i+1}) over consecutive entries; ties go to the
// larger d_i. Throws std::invalid_argument for fewer than two entries.
MaxDrop maximal_drop(const ConfidenceCurve& curve);

inline constexpr int kDropBins = 20;

struct DropHistograms {
    std::vector<int> drop_counts;                        // kDropBins bins over [0, 1]
    std::vector<int> sizes;                              // the 16 ladder values, decreasing
    std::vector<std::vector<std::vector<int>>> by_class; // [class][size index][drop bin]
    int curves = 0;
};

// Drops are clamped to [0, 1] for binning only.
int drop_bin(double drop);
DropHistograms drop_histograms(std::span<const ConfidenceCurve> curves, int num_classes);

struct FalseScoreTable {
    int num_classes = 0;
    std::vector<int> sizes; // decreasing
    std::map<int, std::vector<double>, std::greater<int>> mean;
    std::map<int, std::vector<double>, std::greater<int>> stddev; // population
    std::map<int, std::vector<int>, std::greater<int>> count;

    // Throws std::out_of_range for a size or class without an entry.
    double mean_at(int d, int cls) const;
};

// Accumulates per-image maxima max_p S_p^c at every size.
class FalseScoreAccumulator {
public:
    explicit FalseScoreAccumulator(int num_classes) : num_classes_(num_classes) {}
    void add(int d, const ScoreMatrix& scores, int true_class);
    // Throws std::invalid_argument when a class has no negative images.
    FalseScoreTable finish() const;

private:
    int num_classes_;
    std::map<int, std::vector<std::vector<double>>, std::greater<int>> maxima_; // [d][class] -> values
};

// Statistics over every image whose true class differs, at stride 1.
FalseScoreTable false_score_table(const LadderScorer& scorer, std::span<const LabeledImage> train,
                                  std::size_t workers = 1);

// softmax(v)[true_class] where v holds the patch's true-class score and the
// table means of the other classes at size d.
double patch_local_confidence(double true_score, int true_class, int d, const FalseScoreTable& table);
double patch_local_confidence(const LadderScorer& scorer, const Image& image, const PatchRef& ref, int true_class,
                              const FalseScoreTable& table);

struct MrpRecord {
    std::int64_t image_id = -1;
    int true_class = 0;
    int d_star = 0;
    PatchRef patch;
    double score = 0.0;      // true-class score of the patch
    double confidence = 0.0; // image-level confidence at d*
    bool coincides_with_max_drop = false;
    bool monotone_above = false; // every size >= d* classifies correctly
};

// d* is the smallest size whose decision is correct; absent when none is.
std::optional<MrpRecord> find_mrp(const LadderScores& scores, int true_class, AggregationKind kind,
                                  std::int64_t image_id = -1);

struct CMircRecord {
    std::int64_t image_id = -1;
    PatchRef patch;
    double confidence = 0.0;
    double best_sub_confidence = 0.0;
    double drop = 0.0;
};

// Local confidence of every stride-1 position at one size.
struct ConfidenceField {
    int d = 0;
    int positions = 0; // per axis
    std::vector<double> values; // [y][x]

    double at(int x, int y) const { return values[std::size_t(y) * positions + x]; }
};

ConfidenceField confidence_field(const ScoreMatrix& scores, int d, int true_class, const FalseScoreTable& table);
ConfidenceField confidence_field(const LadderScorer& scorer, const Image& image, int d, int true_class,
                                 const FalseScoreTable& table);

// Records for every parent size d >= 4 present together with d - 2.
std::vector<CMircRecord> find_cmircs_in_fields(const std::map<int, ConfidenceField, std::greater<int>>& fields,
                                               double q, std::int64_t image_id = -1);
std::vector<CMircRecord> find_cmircs(const Image& image, int true_class, const LadderScorer& scorer,
                                     const FalseScoreTable& table, double q = 0.5, std::int64_t image_id = -1);

// Single-linkage clusters of same-size records within Chebyshev distance 1,
// each represented by its highest-confidence member.
std::vector<CMircRecord> dedup_cmircs(std::span<const CMircRecord> records);

inline constexpr int kSubMircExtent = 26;

struct ExternalMircResult {
    std::vector<int> sizes;
    std::vector<double> mirc_confidence;
    std::vector<double> best_sub_confidence;
    std::vector<double> drop;
    std::vector<PatchRef> sub_patches; // the 49 26x26 crops of the resized input
    double max_drop = 0.0;
    int max_drop_size = 0;
};

ExternalMircResult evaluate_external_mirc(const Image& mirc, int true_class, const LadderScorer& scorer,
                                          const FalseScoreTable& table);

struct AccuracyTable {
    std::vector<int> sizes;                     // decreasing
    std::vector<std::vector<double>> per_class; // [size][class]
    std::vector<double> mean;                   // overall accuracy per size
};

// Accumulates image decisions per size.
class AccuracyAccumulator {
public:
    explicit AccuracyAccumulator(int num_classes) : num_classes_(num_classes) {}
    void add(const LadderScores& scores, int true_class, AggregationKind kind);
    AccuracyTable finish() const;

private:
    int num_classes_;
    std::map<int, std::pair<std::vector<int>, std::vector<int>>, std::greater<int>> counts_; // correct, total
};

AccuracyTable accuracy_vs_size(const LadderScorer& scorer, std::span<const LabeledImage> images, AggregationKind kind,
                               std::size_t workers = 1);

} // namespace pbc
