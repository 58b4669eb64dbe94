#include "pbc/aggregation.hpp"

#include <cmath>
#include <stdexcept>

#include "pbc/layers.hpp"

namespace pbc {

namespace {

std::size_t argmax(std::span<const double> v)
{
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

std::vector<std::size_t> column_argmax(const ScoreMatrix& m)
{
    std::vector<std::size_t> best(m.cols, 0);
    for (std::size_t p = 1; p < m.rows; ++p)
        for (std::size_t c = 0; c < m.cols; ++c)
            if (m.at(p, c) > m.at(best[c], c)) best[c] = p;
    return best;
}

} // namespace

std::string to_string(AggregationKind kind) { return kind == AggregationKind::independent ? "independent" : "winner"; }

AggregationKind parse_aggregation(std::string_view text)
{
    if (text == "independent" || text == "max-ind") return AggregationKind::independent;
    if (text == "winner" || text == "winner-directed" || text == "max-dir") return AggregationKind::winner;
    throw std::invalid_argument("unknown aggregation '" + std::string(text) + "' (expected independent|winner)");
}

ScoreMatrix::ScoreMatrix(std::size_t r, std::size_t c, std::vector<double> v)
    : rows(r), cols(c), values(std::move(v))
{
    if (values.empty()) values.assign(rows * cols, 0.0);
    if (values.size() != rows * cols) throw std::invalid_argument("score matrix: value count does not match extents");
}

void validate(const ScoreMatrix& m)
{
    if (m.rows < 1) throw std::invalid_argument("score matrix: needs at least one patch");
    if (m.cols < 2) throw std::invalid_argument("score matrix: needs at least two classes");
    if (m.values.size() != m.rows * m.cols) throw std::invalid_argument("score matrix: value count mismatch");
    if (!m.refs.empty() && m.refs.size() != m.rows) throw std::invalid_argument("score matrix: ref count mismatch");
    for (double v : m.values)
        if (!std::isfinite(v)) throw std::invalid_argument("score matrix: non-finite entry");
}

Cell global_max(const ScoreMatrix& m)
{
    validate(m);
    const auto best = column_argmax(m);
    Cell cell{best[0], 0};
    for (std::size_t c = 1; c < m.cols; ++c)
        if (m.at(best[c], c) > m.at(cell.patch, cell.cls)) cell = {best[c], c};
    return cell;
}

std::vector<double> aggregate_independent(const ScoreMatrix& m)
{
    validate(m);
    const auto best = column_argmax(m);
    std::vector<double> out(m.cols);
    for (std::size_t c = 0; c < m.cols; ++c) out[c] = m.at(best[c], c);
    return out;
}

WinnerScores aggregate_winner_directed(const ScoreMatrix& m)
{
    const Cell cell = global_max(m);
    const auto row = m.row(cell.patch);
    return {std::vector<double>(row.begin(), row.end()), cell.patch};
}

ImageDecision decide(const ScoreMatrix& m, AggregationKind kind, bool per_patch_softmax)
{
    ImageDecision out;
    out.kind = kind;
    out.winner = global_max(m).patch;
    if (!per_patch_softmax) {
        out.scores = kind == AggregationKind::independent ? aggregate_independent(m) : aggregate_winner_directed(m).scores;
        out.probabilities = softmax(out.scores);
    } else {
        ScoreMatrix normalized(m.rows, m.cols);
        for (std::size_t p = 0; p < m.rows; ++p) {
            const auto probs = softmax(m.row(p));
            std::copy(probs.begin(), probs.end(), normalized.values.begin() + std::ptrdiff_t(p * m.cols));
        }
        out.scores = kind == AggregationKind::independent ? aggregate_independent(normalized)
                                                          : aggregate_winner_directed(normalized).scores;
        double sum = 0.0;
        for (double v : out.scores) sum += v;
        out.probabilities = out.scores;
        for (double& v : out.probabilities) v /= sum;
    }
    out.predicted = argmax(out.scores);
    return out;
}

double confidence(const ImageDecision& decision, std::size_t true_class)
{
    if (true_class >= decision.probabilities.size())
        throw std::out_of_range("confidence: class " + std::to_string(true_class) + " out of range");
    return decision.probabilities[true_class];
}

ScoreMatrix aggregation_backward(const ScoreMatrix& m, AggregationKind kind, std::span<const double> image_grad)
{
    validate(m);
    if (image_grad.size() != m.cols) throw std::invalid_argument("aggregation_backward: gradient length mismatch");
    ScoreMatrix grad(m.rows, m.cols);
    if (kind == AggregationKind::independent) {
        const auto best = column_argmax(m);
        for (std::size_t c = 0; c < m.cols; ++c) grad.at(best[c], c) = image_grad[c];
    } else {
        // p* is piecewise constant in the scores, so only row p* receives gradient.
        const std::size_t p = global_max(m).patch;
        for (std::size_t c = 0; c < m.cols; ++c) grad.at(p, c) = image_grad[c];
    }
    return grad;
}

} // namespace pbc
