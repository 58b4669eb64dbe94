#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pbc/patching.hpp"

namespace pbc {

enum class AggregationKind { independent, winner };

std::string to_string(AggregationKind kind);
// Accepts "independent" and "winner" (also "winner-directed").
AggregationKind parse_aggregation(std::string_view text);

// Pre-softmax class scores: one row per patch, one column per class.
struct ScoreMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;
    std::vector<PatchRef> refs; // optional; one per row when present

    ScoreMatrix() = default;
    ScoreMatrix(std::size_t rows, std::size_t cols, std::vector<double> values = {});

    double& at(std::size_t p, std::size_t c) { return values[p * cols + c]; }
    double at(std::size_t p, std::size_t c) const { return values[p * cols + c]; }
    std::span<const double> row(std::size_t p) const { return {values.data() + p * cols, cols}; }
};

// Throws std::invalid_argument unless rows >= 1, cols >= 2, all entries finite.
void validate(const ScoreMatrix& m);

// The (patch, class) cell holding the overall maximum. Ties: lowest class
// first, then lowest patch, so that its class matches the argmax of the
// per-class maxima.
struct Cell {
    std::size_t patch = 0;
    std::size_t cls = 0;
};
Cell global_max(const ScoreMatrix& m);

// score[c] = max_p m[p][c].
std::vector<double> aggregate_independent(const ScoreMatrix& m);

struct WinnerScores {
    std::vector<double> scores;
    std::size_t winner = 0; // p*
};

// All class scores taken from the patch holding the overall maximum.
WinnerScores aggregate_winner_directed(const ScoreMatrix& m);

struct ImageDecision {
    std::vector<double> scores;
    std::vector<double> probabilities;
    std::size_t predicted = 0;
    std::size_t winner = 0;
    AggregationKind kind = AggregationKind::independent;
};

// Aggregates, then softmax. With `per_patch_softmax` (diagnostic only) each
// row is normalized before aggregation and the aggregate renormalized.
ImageDecision decide(const ScoreMatrix& m, AggregationKind kind, bool per_patch_softmax = false);

double confidence(const ImageDecision& decision, std::size_t true_class);

// Routes d(loss)/d(image scores) back to the patch scores: each class's
// gradient lands on the patch its max came from (independent) or entirely on
// row p* (winner). Ties go to the lowest index, matching the forward pass.
ScoreMatrix aggregation_backward(const ScoreMatrix& m, AggregationKind kind, std::span<const double> image_grad);

} // namespace pbc
