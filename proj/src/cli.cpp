#include "pbc/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "pbc/analysis.hpp"
#include "pbc/bytes.hpp"
#include "pbc/dataset.hpp"
#include "pbc/errors.hpp"
#include "pbc/parallel.hpp"
#include "pbc/report.hpp"
#include "pbc/training.hpp"

namespace fs = std::filesystem;

namespace pbc {

namespace {

constexpr const char* kToolVersion = "1.0.0";

const std::vector<std::string> kAnalyses = {"curves", "drops",  "histograms", "accuracy",
                                            "mrp",    "cmirc",  "false-table", "mirc-eval"};
const std::vector<std::string> kDefaultAnalyses = {"curves", "drops", "histograms", "accuracy", "mrp", "false-table"};

struct RunConfig {
    fs::path out = "pbc_run";
    std::uint64_t seed = 7;
    std::size_t workers = default_workers();
    std::vector<int> sizes = ladder_sizes();
    std::string agg = "independent";
    double q = 0.5;
    bool force = false;

    std::string cifar10;
    std::string cifar100;
    std::vector<std::string> classes = star_classes();
    int per_class = 3000;
    int train_per_class = 2500;
    bool color = false;

    int epochs = 150;
    int batch = 50;
    double lr = 1e-3;
    int lr_period = 30;
    double l2 = 1e-4;
    std::vector<int> width = {96, 192};
    int bn_group = 256;
    int eval_every = 0;

    std::vector<std::string> analyses = kDefaultAnalyses;
    int limit = 0;
    int false_limit = 0;
    std::string image;
    std::string image_class;
};

std::string join(const auto& items, const char* sep = ",")
{
    std::ostringstream os;
    bool first = true;
    for (const auto& item : items) {
        if (!first) os << sep;
        os << item;
        first = false;
    }
    return os.str();
}

// Everything that determines results. Output location, worker count and
// source paths are left out: they do not change any output byte.
std::string canonical_config(const RunConfig& c)
{
    std::ostringstream os;
    os << "[run]\n"
       << "tool_version = " << kToolVersion << "\n"
       << "checkpoint_version = " << kCheckpointVersion << "\n"
       << "archive_version = " << kArchiveVersion << "\n"
       << "seed = " << c.seed << "\n"
       << "sizes = " << join(c.sizes) << "\n"
       << "agg = " << c.agg << "\n"
       << "q = " << format_number(c.q) << "\n"
       << "[prepare]\n"
       << "classes = " << join(c.classes) << "\n"
       << "per_class = " << c.per_class << "\n"
       << "train_per_class = " << c.train_per_class << "\n"
       << "color = " << (c.color ? "true" : "false") << "\n"
       << "[train]\n"
       << "epochs = " << c.epochs << "\n"
       << "batch = " << c.batch << "\n"
       << "lr = " << format_number(c.lr) << "\n"
       << "lr_period = " << c.lr_period << "\n"
       << "l2 = " << format_number(c.l2) << "\n"
       << "width = " << join(c.width) << "\n"
       << "bn_group = " << c.bn_group << "\n"
       << "eval_every = " << c.eval_every << "\n"
       << "[analyze]\n"
       << "analysis = " << join(c.analyses) << "\n"
       << "limit = " << c.limit << "\n"
       << "false_limit = " << c.false_limit << "\n"
       << "class = " << c.image_class << "\n";
    return os.str();
}

std::string config_hash(const RunConfig& c)
{
    const std::string text = canonical_config(c);
    return hex32(crc32({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()}));
}

void validate(RunConfig& c)
{
    if (c.sizes.empty()) throw ConfigError("--sizes is empty");
    for (int d : c.sizes)
        if (d < 2 || d > kStandardExtent || d % 2 != 0)
            throw ConfigError("--sizes: " + std::to_string(d) + " is not an even size in [2, 32]");
    std::sort(c.sizes.begin(), c.sizes.end(), std::greater<int>());
    c.sizes.erase(std::unique(c.sizes.begin(), c.sizes.end()), c.sizes.end());
    try {
        c.agg = to_string(parse_aggregation(c.agg));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("--agg: ") + e.what());
    }
    if (!(c.q > 0.0 && c.q < 1.0)) throw ConfigError("--q must lie in (0, 1)");
    if (c.workers < 1) throw ConfigError("--workers must be at least 1");
    if (c.width.size() != 2 || c.width[0] < 1 || c.width[1] < 1)
        throw ConfigError("--width expects two positive channel counts, e.g. 96,192");
    if (c.epochs < 1 || c.batch < 1 || c.lr <= 0.0 || c.lr_period < 1 || c.l2 < 0.0 || c.bn_group < 1 ||
        c.eval_every < 0)
        throw ConfigError("training options out of range");
    if (c.per_class < 2 || c.train_per_class < 1 || c.train_per_class >= c.per_class)
        throw ConfigError("--train-per-class must lie in [1, --per-class)");
    if (c.limit < 0 || c.false_limit < 0) throw ConfigError("--limit and --false-limit must be non-negative");
    std::vector<std::string> expanded;
    for (const auto& a : c.analyses) {
        if (a == "all") {
            expanded.insert(expanded.end(), kAnalyses.begin(), kAnalyses.end());
            continue;
        }
        if (std::find(kAnalyses.begin(), kAnalyses.end(), a) == kAnalyses.end())
            throw ConfigError("--analysis: unknown analysis '" + a + "' (expected " + join(kAnalyses, "|") + ")");
        expanded.push_back(a);
    }
    std::vector<std::string> ordered;
    for (const auto& a : kAnalyses)
        if (std::find(expanded.begin(), expanded.end(), a) != expanded.end()) ordered.push_back(a);
    c.analyses = ordered;
}

void write_effective_config(const RunConfig& c, const std::string& command)
{
    fs::create_directories(c.out);
    std::ostringstream os;
    os << "# effective configuration for '" << command << "'\n"
       << "config_hash = " << config_hash(c) << "\n"
       << canonical_config(c) << "[paths]\n"
       << "out = " << c.out.string() << "\n"
       << "workers = " << c.workers << "\n"
       << "cifar10 = " << c.cifar10 << "\n"
       << "cifar100 = " << c.cifar100 << "\n"
       << "image = " << c.image << "\n";
    write_text_atomic(c.out / ("config_" + command + ".ini"), os.str());
}

std::span<const std::uint8_t> as_bytes(const std::string& s)
{
    return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

struct PreparedData {
    DatasetManifest manifest;
    std::vector<LabeledImage> train;
    std::vector<LabeledImage> test;
};

PreparedData load_prepared(const RunConfig& c, bool need_train, bool need_test)
{
    const fs::path dir = c.out / "data";
    const fs::path manifest_path = dir / "manifest.txt";
    if (!fs::exists(manifest_path))
        throw MissingArtifact("no prepared dataset at " + dir.string() + " (run 'pbc prepare' first)");
    std::map<std::string, std::string> sums;
    {
        const auto bytes = read_file(dir / "checksums.txt");
        std::istringstream in(std::string(bytes.begin(), bytes.end()));
        std::string crc, name;
        while (in >> crc >> name) sums[name] = crc;
    }
    auto checked = [&](const std::string& name) {
        auto bytes = read_file(dir / name);
        auto it = sums.find(name);
        if (it == sums.end()) throw DataError(name + ": no checksum recorded");
        if (hex32(crc32(bytes)) != it->second)
            throw DataError(name + ": checksum mismatch (expected " + it->second + ", got " + hex32(crc32(bytes)) + ")");
        return bytes;
    };
    PreparedData data;
    const auto manifest_bytes = checked("manifest.txt");
    data.manifest = DatasetManifest::parse(std::string(manifest_bytes.begin(), manifest_bytes.end()));
    if (need_train) data.train = decode_archive(checked("train.pbcimg"), "train.pbcimg");
    if (need_test) data.test = decode_archive(checked("test.pbcimg"), "test.pbcimg");
    return data;
}

// `limit` images spread evenly over the split (all when limit is 0).
std::vector<LabeledImage> spread_subset(const std::vector<LabeledImage>& images, int limit)
{
    if (limit <= 0 || std::size_t(limit) >= images.size()) return images;
    std::vector<LabeledImage> out;
    out.reserve(std::size_t(limit));
    for (int i = 0; i < limit; ++i) out.push_back(images[std::size_t(i) * images.size() / std::size_t(limit)]);
    return out;
}

SpnLadder load_ladder(const RunConfig& c, int num_classes)
{
    SpnLadder ladder(1);
    const auto kind = parse_aggregation(c.agg);
    for (int d : c.sizes) {
        const fs::path path = c.out / "models" / checkpoint_name(d, kind);
        if (!fs::exists(path))
            throw MissingArtifact("no checkpoint for patch size " + std::to_string(d) + " (" + path.string() + ")");
        SpnModel model = spn_load(path);
        if (model.patch_size() != d)
            throw DataError(path.string() + ": holds a model for size " + std::to_string(model.patch_size()));
        if (model.num_classes() != num_classes)
            throw DataError(path.string() + ": model has " + std::to_string(model.num_classes()) +
                            " classes, dataset has " + std::to_string(num_classes));
        ladder.add(std::move(model));
    }
    return ladder;
}

int resolve_class(const std::string& text, const DatasetManifest& manifest)
{
    if (text.empty()) throw ConfigError("--class is required");
    for (std::size_t i = 0; i < manifest.classes.size(); ++i)
        if (manifest.classes[i] == text) return int(i);
    if (std::all_of(text.begin(), text.end(), [](unsigned char ch) { return std::isdigit(ch); })) {
        const int idx = std::stoi(text);
        if (idx < int(manifest.classes.size())) return idx;
    }
    throw ConfigError("--class: '" + text + "' is not one of " + join(manifest.classes));
}

// ---------------------------------------------------------------- prepare

int cmd_prepare(const RunConfig& c, std::ostream& out)
{
    const fs::path dir = c.out / "data";
    if (fs::exists(dir / "manifest.txt") && !c.force)
        throw ConfigError("refusing to overwrite the prepared dataset in " + dir.string() + " (pass --force)");
    bool need10 = false, need100 = false;
    for (const auto& name : c.classes) {
        const ClassSpec& spec = find_class(name);
        (spec.source == SourceSet::cifar10 ? need10 : need100) = true;
    }
    if (need10 && c.cifar10.empty()) throw ConfigError("--cifar10 is required for the requested classes");
    if (need100 && c.cifar100.empty()) throw ConfigError("--cifar100 is required for the requested classes");
    for (const auto& p : {need10 ? c.cifar10 : std::string(), need100 ? c.cifar100 : std::string()})
        if (!p.empty() && !fs::exists(p)) throw MissingArtifact("source path does not exist: " + p);
    write_effective_config(c, "prepare");

    std::vector<LabeledImage> cifar10, cifar100;
    if (need10) cifar10 = load_cifar10_dir(c.cifar10);
    if (need100) cifar100 = load_cifar100_dir(c.cifar100);
    StarRequest request{c.classes, c.per_class, c.train_per_class, !c.color};
    SplitDataset split = build_cifar10_star(cifar10, cifar100, request, c.seed);

    fs::create_directories(dir);
    const auto train_bytes = encode_archive(split.train);
    const auto test_bytes = encode_archive(split.test);
    const std::string manifest = split.manifest.to_text();
    std::string provenance = provenance_csv(split.train, "train");
    const std::string test_prov = provenance_csv(split.test, "test");
    provenance += test_prov.substr(test_prov.find('\n') + 1);
    write_file_atomic(dir / "train.pbcimg", train_bytes);
    write_file_atomic(dir / "test.pbcimg", test_bytes);
    write_text_atomic(dir / "provenance.csv", provenance);
    write_text_atomic(dir / "manifest.txt", manifest);
    std::ostringstream sums;
    sums << hex32(crc32(train_bytes)) << "  train.pbcimg\n"
         << hex32(crc32(test_bytes)) << "  test.pbcimg\n"
         << hex32(crc32(as_bytes(manifest))) << "  manifest.txt\n"
         << hex32(crc32(as_bytes(provenance))) << "  provenance.csv\n";
    write_text_atomic(dir / "checksums.txt", sums.str());
    out << "prepared " << split.manifest.classes.size() << " classes x " << c.per_class << " (train "
        << split.train.size() << ", test " << split.test.size() << ") in " << dir.string() << "\n";
    return exit_ok;
}

// ------------------------------------------------------------------ train

int cmd_train(const RunConfig& c, std::ostream& out, std::ostream& err)
{
    PreparedData data = load_prepared(c, true, true);
    write_effective_config(c, "train");
    const std::string hash = config_hash(c);
    const auto kind = parse_aggregation(c.agg);
    const fs::path models = c.out / "models";
    fs::create_directories(models);

    for (int d : c.sizes) {
        const fs::path ckpt = models / checkpoint_name(d, kind);
        if (fs::exists(ckpt)) {
            out << "size " << d << ": checkpoint present, skipping\n";
            continue;
        }
        TrainConfig tc;
        tc.patch_size = d;
        tc.aggregation = kind;
        tc.epochs = c.epochs;
        tc.batch_size = c.batch;
        tc.lr = c.lr;
        tc.lr_period = c.lr_period;
        tc.l2 = c.l2;
        tc.seed = c.seed + std::uint64_t(d);
        tc.widths = {c.width[0], c.width[1]};
        tc.num_classes = int(data.manifest.classes.size());
        tc.bn_group_patches = c.bn_group;
        tc.workers = c.workers;
        tc.test_eval_every = c.eval_every;

        auto log_csv = [&](const TrainLog& log) {
            CsvTable table({"epoch", "loss", "train_acc", "test_acc", "lr", "seconds", "config_hash"});
            for (const auto& e : log.epochs)
                table.add(e.epoch, e.loss, e.train_acc, e.test_acc >= 0.0 ? format_number(e.test_acc) : std::string(),
                          e.lr, format_number(std::round(e.seconds * 1000.0) / 1000.0), hash);
            return table.str();
        };
        out << "size " << d << ": training (" << grid_count(kImageExtent, d, tc.stride()) << " patches per image)\n";
        try {
            TrainResult result = train_model(data.train, data.test, tc, [&](const EpochLog& e) {
                out << "  d=" << d << " epoch " << e.epoch << " loss " << format_number(e.loss) << " train_acc "
                    << format_number(e.train_acc);
                if (e.test_acc >= 0.0) out << " test_acc " << format_number(e.test_acc);
                out << " (" << format_number(std::round(e.seconds * 10.0) / 10.0) << " s)\n";
                out.flush();
            });
            write_text_atomic(models / train_log_name(d, kind), log_csv(result.log));
            spn_save(result.model, ckpt);
            fs::remove(models / ("spn_d" + std::to_string(d) + "_" + c.agg + ".partial"));
        } catch (const TrainingAborted& e) {
            std::string report = std::string("# ") + e.what() + "\n";
            for (const auto& ev : e.log().events) report += "# " + ev + "\n";
            report += log_csv(e.log());
            write_text_atomic(models / ("spn_d" + std::to_string(d) + "_" + c.agg + ".partial"), report);
            err << "size " << d << ": " << e.what() << "\n";
            return exit_failure;
        }
    }
    return exit_ok;
}

// ---------------------------------------------------------------- analyze

bool selected(const RunConfig& c, const std::string& name)
{
    return std::find(c.analyses.begin(), c.analyses.end(), name) != c.analyses.end();
}

FalseScoreTable obtain_false_table(const RunConfig& c, const LadderScorer& ladder, const PreparedData& data,
                                   std::ostream& out)
{
    const auto subset = spread_subset(data.train, c.false_limit);
    out << "false-score table over " << subset.size() << " training images\n";
    return false_score_table(ladder, subset, c.workers);
}

std::string false_table_csv(const FalseScoreTable& table, const std::string& hash)
{
    CsvTable csv({"config_hash", "d", "class", "mean", "std", "count"});
    for (int d : table.sizes)
        for (int cls = 0; cls < table.num_classes; ++cls)
            csv.add(hash, d, cls, table.mean.at(d)[cls], table.stddev.at(d)[cls], table.count.at(d)[cls]);
    return csv.str();
}

// Reads a table written by false_table_csv; empty when absent or stale.
std::optional<FalseScoreTable> read_false_table(const fs::path& path, const std::string& hash, int classes)
{
    if (!fs::exists(path)) return std::nullopt;
    const auto bytes = read_file(path);
    std::istringstream in(std::string(bytes.begin(), bytes.end()));
    std::string line;
    std::getline(in, line);
    FalseScoreTable table;
    table.num_classes = classes;
    while (std::getline(in, line)) {
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
        if (f.size() != 6) throw DataError(path.string() + ": malformed row '" + line + "'");
        if (f[0] != hash) return std::nullopt;
        const int d = std::stoi(f[1]), cls = std::stoi(f[2]);
        auto& mean = table.mean[d];
        if (mean.empty()) {
            table.sizes.push_back(d);
            mean.assign(std::size_t(classes), 0.0);
            table.stddev[d].assign(std::size_t(classes), 0.0);
            table.count[d].assign(std::size_t(classes), 0);
        }
        if (cls < 0 || cls >= classes) throw DataError(path.string() + ": class out of range");
        mean[cls] = std::strtod(f[3].c_str(), nullptr);
        table.stddev[d][cls] = std::strtod(f[4].c_str(), nullptr);
        table.count[d][cls] = std::stoi(f[5]);
    }
    return table;
}

Image load_probe_image(const RunConfig& c, int channels)
{
    if (c.image.empty()) throw ConfigError("--image is required for mirc-eval");
    Image image = read_netpbm(c.image);
    if (image.channels == 3 && channels == 1) image = to_grayscale(image);
    if (image.channels != channels)
        throw DataError(c.image + ": image has " + std::to_string(image.channels) + " channels, models expect " +
                        std::to_string(channels));
    return image;
}

std::string mirc_eval_csv(const ExternalMircResult& r, const RunConfig& c, int cls, const std::string& hash)
{
    CsvTable csv({"config_hash", "image", "class", "d", "mirc_confidence", "best_sub_confidence", "drop",
                  "sub_patches"});
    const std::string name = fs::path(c.image).filename().string();
    for (std::size_t i = 0; i < r.sizes.size(); ++i)
        csv.add(hash, name, cls, r.sizes[i], r.mirc_confidence[i], r.best_sub_confidence[i], r.drop[i],
                r.sub_patches.size());
    return csv.str();
}

struct ImageAnalysis {
    ConfidenceCurve curve;
    std::optional<MaxDrop> drop;
    std::optional<MrpRecord> mrp;
    std::vector<CMircRecord> cmircs;
    std::vector<CMircRecord> cmircs_dedup;
};

int cmd_analyze(const RunConfig& c, std::ostream& out)
{
    const bool need_table = selected(c, "false-table") || selected(c, "cmirc") || selected(c, "mirc-eval");
    PreparedData data = load_prepared(c, need_table, true);
    const int classes = int(data.manifest.classes.size());
    if (selected(c, "cmirc")) {
        for (int d = c.sizes.front(); d >= 2; d -= 2)
            if (std::find(c.sizes.begin(), c.sizes.end(), d) == c.sizes.end())
                throw MissingArtifact("cmirc needs a consecutive ladder down to 2; size " + std::to_string(d) +
                                      " is not among --sizes");
        if (c.sizes.front() < 4) throw MissingArtifact("cmirc needs trained sizes 4 and 2");
    }
    if ((selected(c, "drops") || selected(c, "histograms")) && c.sizes.size() < 2)
        throw ConfigError("drops and histograms need at least two ladder sizes");
    const SpnLadder ladder = load_ladder(c, classes);
    write_effective_config(c, "analyze");
    const std::string hash = config_hash(c);
    const auto kind = parse_aggregation(c.agg);
    const fs::path dir = c.out / "analysis";
    fs::create_directories(dir);

    nlohmann::json index;
    index["config_hash"] = hash;
    index["aggregation"] = c.agg;
    index["sizes"] = c.sizes;
    index["classes"] = data.manifest.classes;
    index["analyses"] = nlohmann::json::object();
    auto record = [&](const std::string& analysis, const std::string& file, const std::string& text) {
        write_text_atomic(dir / file, text);
        index["analyses"][analysis].push_back(file);
    };

    std::optional<FalseScoreTable> table;
    if (need_table) {
        table = obtain_false_table(c, ladder, data, out);
        if (selected(c, "false-table") || selected(c, "cmirc") || selected(c, "mirc-eval"))
            record("false-table", "false_table.csv", false_table_csv(*table, hash));
    }

    const auto images = spread_subset(data.test, c.limit);
    index["images"] = images.size();
    const bool per_image = selected(c, "curves") || selected(c, "drops") || selected(c, "histograms") ||
                           selected(c, "accuracy") || selected(c, "mrp") || selected(c, "cmirc");
    std::vector<ImageAnalysis> results(per_image ? images.size() : 0);
    if (per_image) {
        out << "analyzing " << images.size() << " test images at sizes " << join(c.sizes) << "\n";
        parallel_for(results.size(), c.workers, [&](std::size_t i) {
            const auto& img = images[i];
            const auto id = std::int64_t(i);
            const LadderScores scores = ladder_scores(ladder, img.image, c.sizes);
            auto& r = results[i];
            r.curve = confidence_curve(scores, img.label, kind, c.sizes, id);
            if (r.curve.confidence.size() >= 2) r.drop = maximal_drop(r.curve);
            r.mrp = find_mrp(scores, img.label, kind, id);
            if (selected(c, "cmirc")) {
                std::map<int, ConfidenceField, std::greater<int>> fields;
                for (const auto& [d, m] : scores) fields.emplace(d, confidence_field(m, d, img.label, *table));
                r.cmircs = find_cmircs_in_fields(fields, c.q, id);
                r.cmircs_dedup = dedup_cmircs(r.cmircs);
            }
        });
    }
    const auto& names = data.manifest.classes;

    if (selected(c, "curves")) {
        CsvTable csv({"config_hash", "image", "true_class", "d", "confidence", "predicted", "partial"});
        std::vector<SvgSeries> series(static_cast<std::size_t>(classes));
        std::vector<std::vector<double>> sums(std::size_t(classes), std::vector<double>(c.sizes.size(), 0.0));
        std::vector<int> counts(std::size_t(classes), 0);
        for (const auto& r : results) {
            for (std::size_t k = 0; k < r.curve.sizes.size(); ++k) {
                csv.add(hash, r.curve.image_id, r.curve.true_class, r.curve.sizes[k], r.curve.confidence[k],
                        r.curve.predicted[k], r.curve.partial);
                sums[r.curve.true_class][k] += r.curve.confidence[k];
            }
            ++counts[r.curve.true_class];
        }
        record("curves", "curves.csv", csv.str());
        for (int cls = 0; cls < classes; ++cls) {
            series[cls].name = names[cls];
            if (counts[cls])
                for (std::size_t k = 0; k < c.sizes.size(); ++k)
                    series[cls].points.emplace_back(c.sizes[k], sums[cls][k] / counts[cls]);
        }
        record("curves", "curves.svg",
               svg_line_chart("Mean true-class confidence", "patch size d", "confidence", series));
    }

    std::vector<ConfidenceCurve> curves;
    for (const auto& r : results)
        if (r.drop) curves.push_back(r.curve);

    if (selected(c, "drops")) {
        CsvTable csv({"config_hash", "image", "true_class", "drop", "d_from", "d_to", "correct_at_largest"});
        double total = 0.0;
        int above = 0;
        for (const auto& r : results) {
            if (!r.drop) continue;
            csv.add(hash, r.curve.image_id, r.curve.true_class, r.drop->drop, r.drop->d_from, r.drop->d_to,
                    r.curve.predicted.front() == r.curve.true_class);
            total += r.drop->drop;
            if (r.drop->drop > 0.5) ++above;
        }
        record("drops", "drops.csv", csv.str());
        index["summary"]["mean_max_drop"] = curves.empty() ? 0.0 : total / double(curves.size());
        index["summary"]["drops_above_half"] = above;
    }

    if (selected(c, "histograms") && !curves.empty()) {
        const DropHistograms h = drop_histograms(curves, classes);
        CsvTable one({"config_hash", "bin_lo", "bin_hi", "count"});
        std::vector<std::string> labels;
        std::vector<double> values;
        for (int b = 0; b < kDropBins; ++b) {
            const double lo = double(b) / kDropBins, hi = double(b + 1) / kDropBins;
            one.add(hash, lo, hi, h.drop_counts[b]);
            labels.push_back(format_number(lo));
            values.push_back(h.drop_counts[b]);
        }
        record("histograms", "histogram_drop.csv", one.str());
        CsvTable two({"config_hash", "class", "d", "bin_lo", "bin_hi", "count"});
        for (int cls = 0; cls < classes; ++cls)
            for (std::size_t s = 0; s < h.sizes.size(); ++s)
                for (int b = 0; b < kDropBins; ++b)
                    two.add(hash, names[cls], h.sizes[s], double(b) / kDropBins, double(b + 1) / kDropBins,
                            h.by_class[cls][s][b]);
        record("histograms", "histogram_2d.csv", two.str());
        record("histograms", "histogram_drop.svg",
               svg_bar_chart("Maximal confidence drop", "drop", "images", labels, values));
    }

    if (selected(c, "accuracy")) {
        std::vector<std::vector<int>> correct(c.sizes.size(), std::vector<int>(std::size_t(classes), 0));
        std::vector<int> totals(std::size_t(classes), 0);
        for (const auto& r : results) {
            ++totals[r.curve.true_class];
            for (std::size_t k = 0; k < r.curve.sizes.size(); ++k)
                if (r.curve.predicted[k] == r.curve.true_class) ++correct[k][r.curve.true_class];
        }
        std::vector<std::string> header{"config_hash", "class"};
        for (int d : c.sizes) header.push_back("d" + std::to_string(d));
        CsvTable csv(header);
        std::vector<SvgSeries> series{{"mean", {}}};
        for (int cls = 0; cls <= classes; ++cls) {
            std::vector<std::string> row{hash, cls < classes ? names[cls] : "mean"};
            for (std::size_t k = 0; k < c.sizes.size(); ++k) {
                double acc = 0.0;
                if (cls < classes) {
                    acc = totals[cls] ? double(correct[k][cls]) / totals[cls] : 0.0;
                } else {
                    const int all = std::accumulate(correct[k].begin(), correct[k].end(), 0);
                    acc = results.empty() ? 0.0 : double(all) / double(results.size());
                    series[0].points.emplace_back(c.sizes[k], acc);
                    index["summary"]["accuracy"]["d" + std::to_string(c.sizes[k])] = acc;
                }
                row.push_back(format_number(acc));
            }
            csv.row(row);
        }
        record("accuracy", "accuracy.csv", csv.str());
        record("accuracy", "accuracy.svg", svg_line_chart("Accuracy by patch size", "patch size d", "accuracy", series));
    }

    if (selected(c, "mrp")) {
        CsvTable csv({"config_hash", "image", "true_class", "d_star", "x", "y", "d", "score", "confidence",
                      "coincides_with_max_drop", "monotone_above"});
        int count = 0, coincide = 0;
        for (const auto& r : results) {
            if (!r.mrp) continue;
            const auto& m = *r.mrp;
            csv.add(hash, m.image_id, m.true_class, m.d_star, m.patch.x, m.patch.y, m.patch.d, m.score, m.confidence,
                    m.coincides_with_max_drop, m.monotone_above);
            ++count;
            if (m.coincides_with_max_drop) ++coincide;
        }
        record("mrp", "mrp.csv", csv.str());
        index["summary"]["mrp_records"] = count;
        index["summary"]["mrp_coinciding_with_max_drop"] = coincide;
    }

    if (selected(c, "cmirc")) {
        const std::vector<std::string> header{"config_hash", "image",      "true_class",          "x",   "y",
                                              "d",           "confidence", "best_sub_confidence", "drop"};
        CsvTable raw(header), dedup(header), summary({"config_hash", "image", "true_class", "raw", "deduplicated"});
        std::size_t raw_total = 0, dedup_total = 0;
        for (std::size_t i = 0; i < results.size(); ++i) {
            const int cls = images[i].label;
            for (const auto& m : results[i].cmircs)
                raw.add(hash, m.image_id, cls, m.patch.x, m.patch.y, m.patch.d, m.confidence, m.best_sub_confidence,
                        m.drop);
            for (const auto& m : results[i].cmircs_dedup)
                dedup.add(hash, m.image_id, cls, m.patch.x, m.patch.y, m.patch.d, m.confidence,
                          m.best_sub_confidence, m.drop);
            summary.add(hash, i, cls, results[i].cmircs.size(), results[i].cmircs_dedup.size());
            raw_total += results[i].cmircs.size();
            dedup_total += results[i].cmircs_dedup.size();
        }
        record("cmirc", "cmirc.csv", raw.str());
        record("cmirc", "cmirc_dedup.csv", dedup.str());
        record("cmirc", "cmirc_summary.csv", summary.str());
        const double n = std::max<double>(1.0, double(results.size()));
        index["summary"]["cmirc_per_image"] = double(raw_total) / n;
        index["summary"]["cmirc_dedup_per_image"] = double(dedup_total) / n;
    }

    if (selected(c, "mirc-eval")) {
        const int cls = resolve_class(c.image_class, data.manifest);
        const Image probe = load_probe_image(c, ladder.model(c.sizes.front()).config().input_channels);
        const ExternalMircResult r = evaluate_external_mirc(probe, cls, ladder, *table);
        record("mirc-eval", "mirc_eval.csv", mirc_eval_csv(r, c, cls, hash));
        index["summary"]["mirc_max_drop"] = r.max_drop;
    }

    write_text_atomic(dir / "index.json", index.dump(2) + "\n");
    out << "wrote " << dir.string() << "\n";
    return exit_ok;
}

// -------------------------------------------------------------- mirc-eval

int cmd_mirc_eval(const RunConfig& c, std::ostream& out)
{
    PreparedData data = load_prepared(c, true, false);
    const int classes = int(data.manifest.classes.size());
    const int cls = resolve_class(c.image_class, data.manifest);
    const SpnLadder ladder = load_ladder(c, classes);
    const Image probe = load_probe_image(c, ladder.model(c.sizes.front()).config().input_channels);
    write_effective_config(c, "mirc-eval");
    const std::string hash = config_hash(c);
    const fs::path dir = c.out / "analysis";
    fs::create_directories(dir);

    auto table = read_false_table(dir / "false_table.csv", hash, classes);
    if (table) {
        for (int d : c.sizes)
            if (!table->mean.count(d)) table.reset();
    }
    if (!table) {
        table = obtain_false_table(c, ladder, data, out);
        write_text_atomic(dir / "false_table.csv", false_table_csv(*table, hash));
    }
    const ExternalMircResult r = evaluate_external_mirc(probe, cls, ladder, *table);
    const std::string stem = fs::path(c.image).stem().string();
    write_text_atomic(dir / ("mirc_eval_" + stem + ".csv"), mirc_eval_csv(r, c, cls, hash));
    out << "sub-patches: " << r.sub_patches.size() << " of size " << kSubMircExtent << "x" << kSubMircExtent << "\n";
    for (std::size_t i = 0; i < r.sizes.size(); ++i)
        out << "  d=" << r.sizes[i] << " confidence " << format_number(r.mirc_confidence[i]) << " best sub-patch "
            << format_number(r.best_sub_confidence[i]) << " drop " << format_number(r.drop[i]) << "\n";
    out << "max drop " << format_number(r.max_drop) << " at d=" << r.max_drop_size << "\n";
    return exit_ok;
}

} // namespace

// ------------------------------------------------------------------ netpbm

Image read_netpbm(const fs::path& path)
{
    const auto bytes = read_file(path);
    std::size_t pos = 0;
    auto token = [&]() {
        for (;;) {
            while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
            if (pos < bytes.size() && bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                continue;
            }
            break;
        }
        std::string t;
        while (pos < bytes.size() && !std::isspace(bytes[pos])) t += char(bytes[pos++]);
        if (t.empty()) throw DataError(path.string() + ": truncated header at offset " + std::to_string(pos));
        return t;
    };
    auto number = [&]() {
        const std::string t = token();
        if (!std::all_of(t.begin(), t.end(), [](unsigned char ch) { return std::isdigit(ch); }))
            throw DataError(path.string() + ": bad header field '" + t + "' at offset " + std::to_string(pos));
        return std::stoi(t);
    };
    const std::string magic = token();
    if (magic != "P5" && magic != "P2" && magic != "P6")
        throw DataError(path.string() + ": unsupported image format '" + magic + "' (expected P2, P5 or P6)");
    const int w = number(), h = number(), maxval = number();
    if (w < 1 || h < 1 || maxval < 1 || maxval > 65535) throw DataError(path.string() + ": bad image header");
    const int channels = magic == "P6" ? 3 : 1;
    Image image(h, w, channels);
    const std::size_t n = std::size_t(w) * h * channels;
    std::vector<int> raw(n);
    if (magic == "P2") {
        for (auto& v : raw) v = number();
    } else {
        ++pos; // single whitespace after maxval
        const std::size_t width = maxval > 255 ? 2 : 1;
        if (bytes.size() < pos + n * width)
            throw DataError(path.string() + ": pixel data truncated at offset " + std::to_string(bytes.size()));
        for (std::size_t i = 0; i < n; ++i)
            raw[i] = width == 1 ? bytes[pos + i] : (bytes[pos + 2 * i] << 8 | bytes[pos + 2 * i + 1]);
    }
    // Netpbm interleaves channels; Image is planar.
    const std::size_t plane = std::size_t(w) * h;
    for (std::size_t p = 0; p < plane; ++p)
        for (int ch = 0; ch < channels; ++ch)
            image.pixels[ch * plane + p] = float(std::min(raw[p * channels + ch], maxval)) / float(maxval);
    return image;
}

void write_pgm(const fs::path& path, const Image& image)
{
    if (image.channels != 1) throw ShapeError("write_pgm: expected a single-channel image");
    std::string text = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
    std::vector<std::uint8_t> bytes(text.begin(), text.end());
    for (float p : image.pixels) bytes.push_back(std::uint8_t(std::lround(std::clamp(p, 0.0f, 1.0f) * 255.0f)));
    write_file_atomic(path, bytes);
}

// -------------------------------------------------------------------- main

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    RunConfig c;
    std::string out_dir = c.out.string();
    CLI::App app{"Patch-based image classification: dataset preparation, training and analysis", "pbc"};
    app.set_config("--config", "", "INI file with [prepare]/[train]/[analyze]/[mirc-eval] sections");
    app.require_subcommand(1, 1);
    app.add_option("--out", out_dir, "Run directory")->capture_default_str();
    app.add_option("--seed", c.seed, "Sampling, initialization and shuffling seed")->capture_default_str();
    app.add_option("--workers", c.workers, "Worker threads (results do not depend on it)")->capture_default_str();
    app.add_option("--sizes", c.sizes, "Ladder patch sizes")->delimiter(',')->capture_default_str();
    app.add_option("--agg", c.agg, "Aggregation: independent or winner")->capture_default_str();
    app.add_option("--q", c.q, "Local recognizability threshold for cMIRCs")->capture_default_str();
    app.add_flag("--force", c.force, "Overwrite an existing prepared dataset");

    auto* prepare = app.add_subcommand("prepare", "Assemble the dataset archive from CIFAR binaries");
    prepare->add_option("--cifar10", c.cifar10, "Directory with data_batch_*.bin and test_batch.bin");
    prepare->add_option("--cifar100", c.cifar100, "Directory with train.bin and test.bin");
    prepare->add_option("--classes", c.classes, "Class names in label order")->delimiter(',')->capture_default_str();
    prepare->add_option("--per-class", c.per_class, "Samples per class")->capture_default_str();
    prepare->add_option("--train-per-class", c.train_per_class, "Training samples per class")->capture_default_str();
    prepare->add_flag("--color", c.color, "Keep RGB instead of converting to grayscale");

    auto* train = app.add_subcommand("train", "Train one patch network per ladder size");
    train->add_option("--epochs", c.epochs)->capture_default_str();
    train->add_option("--batch", c.batch, "Images per batch")->capture_default_str();
    train->add_option("--lr", c.lr, "Initial learning rate")->capture_default_str();
    train->add_option("--lr-period", c.lr_period, "Epochs between learning-rate halvings")->capture_default_str();
    train->add_option("--l2", c.l2, "L2 coefficient on convolution weights")->capture_default_str();
    train->add_option("--width", c.width, "Channel widths of the two conv stages")->delimiter(',')->capture_default_str();
    train->add_option("--bn-group", c.bn_group, "Max patches per batch-norm statistics group")->capture_default_str();
    train->add_option("--eval-every", c.eval_every, "Test evaluation period in epochs (0: final only)")
        ->capture_default_str();

    auto* analyze = app.add_subcommand("analyze", "Run analyses over trained ladders");
    analyze->add_option("--analysis", c.analyses, "Analyses: " + join(kAnalyses) + " or all")
        ->delimiter(',')
        ->capture_default_str();
    analyze->add_option("--limit", c.limit, "Test images to analyze, spread over the split (0: all)")
        ->capture_default_str();
    analyze->add_option("--false-limit", c.false_limit, "Training images for the false-score table (0: all)")
        ->capture_default_str();
    analyze->add_option("--image", c.image, "PGM/PPM image for mirc-eval");
    analyze->add_option("--class", c.image_class, "True class (name or index) for mirc-eval");

    auto* mirc = app.add_subcommand("mirc-eval", "Evaluate an external minimal image");
    mirc->add_option("--image", c.image, "PGM/PPM image")->required();
    mirc->add_option("--class", c.image_class, "True class (name or index)")->required();
    mirc->add_option("--false-limit", c.false_limit, "Training images for the false-score table (0: all)")
        ->capture_default_str();

    for (auto* sub : {prepare, train, analyze, mirc}) sub->fallthrough();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? exit_ok : exit_config;
    }

    try {
        c.out = out_dir;
        validate(c);
        if (prepare->parsed()) return cmd_prepare(c, out);
        if (train->parsed()) return cmd_train(c, out, err);
        if (analyze->parsed()) return cmd_analyze(c, out);
        return cmd_mirc_eval(c, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return exit_config;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return exit_data;
    } catch (const MissingArtifact& e) {
        err << "missing artifact: " << e.what() << "\n";
        return exit_missing;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_failure;
    }
}

} // namespace pbc
