#include "pbc/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "pbc/errors.hpp"
#include "pbc/parallel.hpp"
#include "pbc/patching.hpp"

namespace pbc {

std::vector<int> ladder_sizes()
{
    std::vector<int> sizes;
    for (int d = kStandardExtent; d >= 2; d -= 2) sizes.push_back(d);
    return sizes;
}

bool LadderScorer::has_size(int d) const
{
    const auto s = sizes();
    return std::find(s.begin(), s.end(), d) != s.end();
}

void SpnLadder::add(SpnModel model)
{
    if (!models_.empty() && models_.begin()->second.num_classes() != model.num_classes())
        throw ConfigError("ladder: model for size " + std::to_string(model.patch_size()) + " has " +
                          std::to_string(model.num_classes()) + " classes, expected " +
                          std::to_string(models_.begin()->second.num_classes()));
    const int d = model.patch_size();
    models_.insert_or_assign(d, std::move(model));
}

const SpnModel& SpnLadder::model(int d) const
{
    auto it = models_.find(d);
    if (it == models_.end()) throw MissingArtifact("ladder: no model for patch size " + std::to_string(d));
    return it->second;
}

std::vector<int> SpnLadder::sizes() const
{
    std::vector<int> out;
    for (const auto& [d, m] : models_) out.push_back(d);
    return out;
}

int SpnLadder::num_classes() const
{
    if (models_.empty()) throw MissingArtifact("ladder: no models loaded");
    return models_.begin()->second.num_classes();
}

ScoreMatrix SpnLadder::score(const Image& image, std::span<const PatchRef> refs, int model_d) const
{
    const SpnModel& m = model(model_d);
    std::vector<Image> patches;
    patches.reserve(refs.size());
    for (const auto& ref : refs) patches.push_back(standardize(image, ref));
    ScoreMatrix out = spn_batch_score(m, patches, workers_);
    out.refs.assign(refs.begin(), refs.end());
    return out;
}

ScoreMatrix score_grid(const LadderScorer& scorer, const Image& image, int d, int stride)
{
    const PatchGrid grid = make_grid(std::min(image.height, image.width), d, stride);
    return scorer.score(image, grid.refs, d);
}

LadderScores ladder_scores(const LadderScorer& scorer, const Image& image, std::span<const int> sizes)
{
    LadderScores out;
    for (int d : sizes)
        if (scorer.has_size(d)) out.emplace(d, score_grid(scorer, image, d));
    return out;
}

ConfidenceCurve confidence_curve(const LadderScores& scores, int true_class, AggregationKind kind,
                                 std::span<const int> requested, std::int64_t image_id)
{
    std::vector<int> order(requested.begin(), requested.end());
    std::sort(order.begin(), order.end(), std::greater<int>());
    order.erase(std::unique(order.begin(), order.end()), order.end());
    ConfidenceCurve curve;
    curve.image_id = image_id;
    curve.true_class = true_class;
    for (int d : order) {
        auto it = scores.find(d);
        if (it == scores.end()) {
            curve.partial = true;
            continue;
        }
        const ImageDecision decision = decide(it->second, kind);
        curve.sizes.push_back(d);
        curve.confidence.push_back(confidence(decision, std::size_t(true_class)));
        curve.predicted.push_back(int(decision.predicted));
    }
    return curve;
}

ConfidenceCurve confidence_curve(const Image& image, int true_class, const LadderScorer& scorer, AggregationKind kind,
                                 std::span<const int> requested, std::int64_t image_id)
{
    return confidence_curve(ladder_scores(scorer, image, requested), true_class, kind, requested, image_id);
}

MaxDrop maximal_drop(const ConfidenceCurve& curve)
{
    if (curve.confidence.size() < 2) throw std::invalid_argument("maximal_drop: curve needs at least two entries");
    MaxDrop best{curve.confidence[0] - curve.confidence[1], curve.sizes[0], curve.sizes[1]};
    for (std::size_t i = 1; i + 1 < curve.confidence.size(); ++i) {
        const double drop = curve.confidence[i] - curve.confidence[i + 1];
        if (drop > best.drop) best = {drop, curve.sizes[i], curve.sizes[i + 1]};
    }
    return best;
}

int drop_bin(double drop)
{
    const double clamped = std::clamp(drop, 0.0, 1.0);
    return std::min(kDropBins - 1, int(std::floor(clamped * kDropBins)));
}

DropHistograms drop_histograms(std::span<const ConfidenceCurve> curves, int num_classes)
{
    if (curves.empty()) throw std::invalid_argument("drop_histograms: no curves");
    DropHistograms h;
    h.drop_counts.assign(kDropBins, 0);
    h.sizes = ladder_sizes();
    h.by_class.assign(std::size_t(num_classes),
                      std::vector<std::vector<int>>(h.sizes.size(), std::vector<int>(kDropBins, 0)));
    for (const auto& curve : curves) {
        const MaxDrop drop = maximal_drop(curve);
        const int bin = drop_bin(drop.drop);
        ++h.drop_counts[bin];
        const auto pos = std::find(h.sizes.begin(), h.sizes.end(), drop.d_from);
        if (curve.true_class < 0 || curve.true_class >= num_classes || pos == h.sizes.end())
            throw std::invalid_argument("drop_histograms: curve outside the class or size range");
        ++h.by_class[curve.true_class][pos - h.sizes.begin()][bin];
        ++h.curves;
    }
    return h;
}

double FalseScoreTable::mean_at(int d, int cls) const
{
    auto it = mean.find(d);
    if (it == mean.end()) throw std::out_of_range("false-score table has no row for size " + std::to_string(d));
    if (cls < 0 || std::size_t(cls) >= it->second.size())
        throw std::out_of_range("false-score table has no entry for class " + std::to_string(cls));
    return it->second[cls];
}

void FalseScoreAccumulator::add(int d, const ScoreMatrix& scores, int true_class)
{
    if (int(scores.cols) != num_classes_) throw std::invalid_argument("false-score: class count mismatch");
    const auto maxima = aggregate_independent(scores);
    auto& rows = maxima_[d];
    if (rows.empty()) rows.resize(std::size_t(num_classes_));
    for (int c = 0; c < num_classes_; ++c)
        if (c != true_class) rows[c].push_back(maxima[c]);
}

FalseScoreTable FalseScoreAccumulator::finish() const
{
    FalseScoreTable table;
    table.num_classes = num_classes_;
    for (const auto& [d, rows] : maxima_) {
        table.sizes.push_back(d);
        auto& mean = table.mean[d];
        auto& sd = table.stddev[d];
        auto& count = table.count[d];
        for (int c = 0; c < num_classes_; ++c) {
            const auto& v = rows[c];
            if (v.empty())
                throw std::invalid_argument("false-score: class " + std::to_string(c) + " has no negative images at size " +
                                            std::to_string(d));
            const double m = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
            double ss = 0.0;
            for (double x : v) ss += (x - m) * (x - m);
            mean.push_back(m);
            sd.push_back(std::sqrt(ss / double(v.size())));
            count.push_back(int(v.size()));
        }
    }
    return table;
}

FalseScoreTable false_score_table(const LadderScorer& scorer, std::span<const LabeledImage> train,
                                  std::size_t workers)
{
    const auto sizes = scorer.sizes();
    std::vector<std::vector<ScoreMatrix>> per_image(train.size());
    parallel_for(train.size(), workers, [&](std::size_t i) {
        for (int d : sizes) {
            // Keep only the per-class maxima; the full matrix is not needed.
            const auto maxima = aggregate_independent(score_grid(scorer, train[i].image, d));
            per_image[i].emplace_back(1, maxima.size(), maxima);
        }
    });
    FalseScoreAccumulator acc(scorer.num_classes());
    for (std::size_t i = 0; i < train.size(); ++i)
        for (std::size_t k = 0; k < sizes.size(); ++k) acc.add(sizes[k], per_image[i][k], train[i].label);
    return acc.finish();
}

double patch_local_confidence(double true_score, int true_class, int d, const FalseScoreTable& table)
{
    if (true_class < 0 || true_class >= table.num_classes)
        throw std::out_of_range("local confidence: class " + std::to_string(true_class) + " outside the table");
    std::vector<double> v(std::size_t(table.num_classes));
    for (int c = 0; c < table.num_classes; ++c) v[c] = c == true_class ? true_score : table.mean_at(d, c);
    return softmax(v)[true_class];
}

double patch_local_confidence(const LadderScorer& scorer, const Image& image, const PatchRef& ref, int true_class,
                              const FalseScoreTable& table)
{
    const ScoreMatrix m = scorer.score(image, std::span(&ref, 1), ref.d);
    return patch_local_confidence(m.at(0, std::size_t(true_class)), true_class, ref.d, table);
}

std::optional<MrpRecord> find_mrp(const LadderScores& scores, int true_class, AggregationKind kind,
                                  std::int64_t image_id)
{
    const auto cls = std::size_t(true_class);
    std::vector<int> sizes;
    std::vector<bool> correct;
    std::vector<double> conf;
    for (const auto& [d, m] : scores) {
        const ImageDecision decision = decide(m, kind);
        sizes.push_back(d);
        correct.push_back(decision.predicted == cls);
        conf.push_back(confidence(decision, cls));
    }
    std::optional<std::size_t> star;
    for (std::size_t i = 0; i < sizes.size(); ++i)
        if (correct[i]) star = i;
    if (!star) return std::nullopt;

    const ScoreMatrix& m = scores.at(sizes[*star]);
    if (m.refs.size() != m.rows) throw std::invalid_argument("find_mrp: score matrix lacks patch refs");
    std::size_t best = 0;
    for (std::size_t p = 1; p < m.rows; ++p)
        if (m.at(p, cls) > m.at(best, cls)) best = p;

    MrpRecord rec;
    rec.image_id = image_id;
    rec.true_class = true_class;
    rec.d_star = sizes[*star];
    rec.patch = m.refs[best];
    rec.score = m.at(best, cls);
    rec.confidence = conf[*star];
    rec.monotone_above = std::all_of(correct.begin(), correct.begin() + std::ptrdiff_t(*star) + 1, [](bool b) { return b; });
    if (sizes.size() >= 2) {
        ConfidenceCurve curve;
        curve.sizes = sizes;
        curve.confidence = conf;
        rec.coincides_with_max_drop = maximal_drop(curve).d_from == rec.d_star;
    }
    return rec;
}

ConfidenceField confidence_field(const ScoreMatrix& m, int d, int true_class, const FalseScoreTable& table)
{
    ConfidenceField field;
    field.d = d;
    field.positions = int(std::lround(std::sqrt(double(m.rows))));
    if (std::size_t(field.positions) * std::size_t(field.positions) != m.rows)
        throw std::invalid_argument("confidence field: score matrix is not a square stride-1 grid");
    field.values.resize(m.rows);
    for (std::size_t p = 0; p < m.rows; ++p)
        field.values[p] = patch_local_confidence(m.at(p, std::size_t(true_class)), true_class, d, table);
    return field;
}

ConfidenceField confidence_field(const LadderScorer& scorer, const Image& image, int d, int true_class,
                                 const FalseScoreTable& table)
{
    return confidence_field(score_grid(scorer, image, d), d, true_class, table);
}

std::vector<CMircRecord> find_cmircs_in_fields(const std::map<int, ConfidenceField, std::greater<int>>& fields,
                                               double q, std::int64_t image_id)
{
    if (!(q > 0.0 && q < 1.0)) throw std::invalid_argument("cmirc: q must lie in (0, 1)");
    std::vector<CMircRecord> out;
    for (const auto& [d, parent] : fields) {
        if (d < 4) continue;
        auto it = fields.find(d - 2);
        if (it == fields.end()) continue;
        const ConfidenceField& sub = it->second;
        if (sub.positions != parent.positions + 2)
            throw std::invalid_argument("cmirc: field sizes at d=" + std::to_string(d) + " are inconsistent");
        for (int y = 0; y < parent.positions; ++y)
            for (int x = 0; x < parent.positions; ++x) {
                const double c = parent.at(x, y);
                if (c < q) continue;
                double best = -1.0;
                for (int oy = 0; oy <= 2; ++oy)
                    for (int ox = 0; ox <= 2; ++ox) best = std::max(best, sub.at(x + ox, y + oy));
                if (best < q) out.push_back({image_id, PatchRef{x, y, d, image_id}, c, best, c - best});
            }
    }
    return out;
}

std::vector<CMircRecord> find_cmircs(const Image& image, int true_class, const LadderScorer& scorer,
                                     const FalseScoreTable& table, double q, std::int64_t image_id)
{
    if (!(q > 0.0 && q < 1.0)) throw std::invalid_argument("cmirc: q must lie in (0, 1)");
    std::map<int, ConfidenceField, std::greater<int>> fields;
    for (int d : scorer.sizes()) {
        const bool parent = d >= 4 && scorer.has_size(d - 2);
        const bool child = scorer.has_size(d + 2) && d + 2 >= 4;
        if (parent || child) fields.emplace(d, confidence_field(scorer, image, d, true_class, table));
    }
    return find_cmircs_in_fields(fields, q, image_id);
}

std::vector<CMircRecord> dedup_cmircs(std::span<const CMircRecord> records)
{
    const std::size_t n = records.size();
    std::vector<std::size_t> parent(n);
    std::iota(parent.begin(), parent.end(), std::size_t{0});
    auto find = [&](std::size_t i) {
        while (parent[i] != i) i = parent[i] = parent[parent[i]];
        return i;
    };
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const auto& a = records[i].patch;
            const auto& b = records[j].patch;
            if (a.d == b.d && std::abs(a.x - b.x) <= 1 && std::abs(a.y - b.y) <= 1) parent[find(i)] = find(j);
        }
    auto better = [](const CMircRecord& a, const CMircRecord& b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        if (a.patch.y != b.patch.y) return a.patch.y < b.patch.y;
        return a.patch.x < b.patch.x;
    };
    std::map<std::size_t, std::size_t> rep; // root -> best member
    for (std::size_t i = 0; i < n; ++i) {
        auto [it, inserted] = rep.emplace(find(i), i);
        if (!inserted && better(records[i], records[it->second])) it->second = i;
    }
    std::vector<CMircRecord> out;
    for (const auto& [root, i] : rep) out.push_back(records[i]);
    std::sort(out.begin(), out.end(), [](const CMircRecord& a, const CMircRecord& b) {
        if (a.patch.d != b.patch.d) return a.patch.d > b.patch.d;
        if (a.patch.y != b.patch.y) return a.patch.y < b.patch.y;
        return a.patch.x < b.patch.x;
    });
    return out;
}

ExternalMircResult evaluate_external_mirc(const Image& mirc, int true_class, const LadderScorer& scorer,
                                          const FalseScoreTable& table)
{
    if (mirc.height < 2 || mirc.width < 2)
        throw ShapeError("external mirc: input " + std::to_string(mirc.height) + "x" + std::to_string(mirc.width) +
                         " is smaller than 2x2");
    const Image resized = resize_bilinear(mirc, kStandardExtent, kStandardExtent);
    ExternalMircResult out;
    out.sub_patches = make_grid(kStandardExtent, kSubMircExtent, 1).refs;
    const PatchRef whole{0, 0, kStandardExtent};
    const auto cls = std::size_t(true_class);
    bool first = true;
    for (int d : scorer.sizes()) {
        const ScoreMatrix full = scorer.score(resized, std::span(&whole, 1), d);
        const double c = patch_local_confidence(full.at(0, cls), true_class, d, table);
        const ScoreMatrix subs = scorer.score(resized, out.sub_patches, d);
        double best = 0.0;
        for (std::size_t p = 0; p < subs.rows; ++p)
            best = std::max(best, patch_local_confidence(subs.at(p, cls), true_class, d, table));
        out.sizes.push_back(d);
        out.mirc_confidence.push_back(c);
        out.best_sub_confidence.push_back(best);
        out.drop.push_back(c - best);
        if (first || c - best > out.max_drop) {
            out.max_drop = c - best;
            out.max_drop_size = d;
            first = false;
        }
    }
    if (first) throw MissingArtifact("external mirc: no ladder models");
    return out;
}

void AccuracyAccumulator::add(const LadderScores& scores, int true_class, AggregationKind kind)
{
    if (true_class < 0 || true_class >= num_classes_)
        throw std::out_of_range("accuracy: class " + std::to_string(true_class) + " out of range");
    for (const auto& [d, m] : scores) {
        auto& [correct, total] = counts_[d];
        if (total.empty()) {
            correct.assign(std::size_t(num_classes_), 0);
            total.assign(std::size_t(num_classes_), 0);
        }
        ++total[true_class];
        if (decide(m, kind).predicted == std::size_t(true_class)) ++correct[true_class];
    }
}

AccuracyTable AccuracyAccumulator::finish() const
{
    AccuracyTable table;
    for (const auto& [d, ct] : counts_) {
        const auto& [correct, total] = ct;
        table.sizes.push_back(d);
        std::vector<double> per(std::size_t(num_classes_), 0.0);
        int all_correct = 0, all_total = 0;
        for (int c = 0; c < num_classes_; ++c) {
            if (total[c]) per[c] = double(correct[c]) / double(total[c]);
            all_correct += correct[c];
            all_total += total[c];
        }
        table.per_class.push_back(std::move(per));
        table.mean.push_back(all_total ? double(all_correct) / double(all_total) : 0.0);
    }
    return table;
}

AccuracyTable accuracy_vs_size(const LadderScorer& scorer, std::span<const LabeledImage> images, AggregationKind kind,
                               std::size_t workers)
{
    const auto sizes = scorer.sizes();
    std::vector<std::vector<int>> predicted(images.size());
    parallel_for(images.size(), workers, [&](std::size_t i) {
        for (int d : sizes) predicted[i].push_back(int(decide(score_grid(scorer, images[i].image, d), kind).predicted));
    });
    AccuracyTable table;
    table.sizes = sizes;
    const int classes = scorer.num_classes();
    for (std::size_t k = 0; k < sizes.size(); ++k) {
        std::vector<int> correct(std::size_t(classes), 0), total(std::size_t(classes), 0);
        int all = 0;
        for (std::size_t i = 0; i < images.size(); ++i) {
            const int label = images[i].label;
            ++total.at(std::size_t(label));
            if (predicted[i][k] == label) {
                ++correct[label];
                ++all;
            }
        }
        std::vector<double> per(std::size_t(classes), 0.0);
        for (int c = 0; c < classes; ++c)
            if (total[c]) per[c] = double(correct[c]) / double(total[c]);
        table.per_class.push_back(std::move(per));
        table.mean.push_back(images.empty() ? 0.0 : double(all) / double(images.size()));
    }
    return table;
}

} // namespace pbc
