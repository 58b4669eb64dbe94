#include "pbc/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <sstream>

#include "pbc/bytes.hpp"
#include "pbc/errors.hpp"
#include "pbc/patching.hpp"

namespace pbc {

namespace {

constexpr char kArchiveMagic[8] = {'P', 'B', 'C', 'I', 'M', 'G', '\r', '\n'};
constexpr std::size_t kPlane = 1024;

Image decode_pixels(std::span<const std::uint8_t> bytes, int channels)
{
    Image image(kImageExtent, kImageExtent, channels);
    for (std::size_t i = 0; i < image.pixels.size(); ++i) image.pixels[i] = float(bytes[i]) / 255.0f;
    return image;
}

std::string trim(std::string_view s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

} // namespace

std::vector<LabeledImage> parse_cifar10(std::span<const std::uint8_t> bytes, const std::string& source)
{
    if (bytes.size() % kCifar10RecordBytes != 0)
        throw DataError(source + ": length " + std::to_string(bytes.size()) + " is not a multiple of " +
                        std::to_string(kCifar10RecordBytes));
    std::vector<LabeledImage> out;
    out.reserve(bytes.size() / kCifar10RecordBytes);
    for (std::size_t off = 0; off < bytes.size(); off += kCifar10RecordBytes) {
        const int label = bytes[off];
        if (label >= 10)
            throw DataError(source + ": label " + std::to_string(label) + " out of range at offset " + std::to_string(off));
        const auto index = std::uint32_t(off / kCifar10RecordBytes);
        out.push_back({decode_pixels(bytes.subspan(off + 1, 3 * kPlane), 3), label, {source, index, label, -1}});
    }
    return out;
}

std::vector<LabeledImage> parse_cifar100(std::span<const std::uint8_t> bytes, const std::string& source)
{
    if (bytes.size() % kCifar100RecordBytes != 0)
        throw DataError(source + ": length " + std::to_string(bytes.size()) + " is not a multiple of " +
                        std::to_string(kCifar100RecordBytes));
    std::vector<LabeledImage> out;
    out.reserve(bytes.size() / kCifar100RecordBytes);
    for (std::size_t off = 0; off < bytes.size(); off += kCifar100RecordBytes) {
        const int coarse = bytes[off], fine = bytes[off + 1];
        if (coarse >= 20)
            throw DataError(source + ": coarse label " + std::to_string(coarse) + " out of range at offset " +
                            std::to_string(off));
        if (fine >= 100)
            throw DataError(source + ": fine label " + std::to_string(fine) + " out of range at offset " +
                            std::to_string(off + 1));
        const auto index = std::uint32_t(off / kCifar100RecordBytes);
        out.push_back({decode_pixels(bytes.subspan(off + 2, 3 * kPlane), 3), fine, {source, index, fine, coarse}});
    }
    return out;
}

namespace {

std::vector<LabeledImage> load_dir(const std::filesystem::path& dir, const std::vector<std::string>& names,
                                   bool cifar100)
{
    if (!std::filesystem::is_directory(dir)) throw MissingArtifact("data directory not found: " + dir.string());
    std::vector<LabeledImage> all;
    for (const auto& name : names) {
        const auto path = dir / name;
        if (!std::filesystem::exists(path)) continue;
        const auto bytes = read_file(path);
        const std::string source = (cifar100 ? "cifar100:" : "cifar10:") + name;
        auto part = cifar100 ? parse_cifar100(bytes, source) : parse_cifar10(bytes, source);
        all.insert(all.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    if (all.empty()) throw MissingArtifact("no CIFAR batch files found in " + dir.string());
    return all;
}

} // namespace

std::vector<LabeledImage> load_cifar10_dir(const std::filesystem::path& dir)
{
    return load_dir(dir,
                    {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin",
                     "test_batch.bin"},
                    false);
}

std::vector<LabeledImage> load_cifar100_dir(const std::filesystem::path& dir)
{
    return load_dir(dir, {"train.bin", "test.bin"}, true);
}

Image to_grayscale(const Image& image)
{
    if (image.channels != 3)
        throw ShapeError("to_grayscale: expected 3 channels, got " + std::to_string(image.channels));
    Image out(image.height, image.width, 1);
    const std::size_t plane = std::size_t(image.height) * image.width;
    for (std::size_t i = 0; i < plane; ++i) {
        const double luma = 0.299 * image.pixels[i] + 0.587 * image.pixels[plane + i] + 0.114 * image.pixels[2 * plane + i];
        out.pixels[i] = float(std::clamp(luma, 0.0, 1.0));
    }
    return out;
}

const std::vector<ClassSpec>& known_classes()
{
    static const std::vector<ClassSpec> classes = {
        {"airplane", SourceSet::cifar10, {0}},
        {"automobile", SourceSet::cifar10, {1}},
        {"bird", SourceSet::cifar10, {2}},
        {"cat", SourceSet::cifar10, {3}},
        {"deer", SourceSet::cifar10, {4}},
        {"dog", SourceSet::cifar10, {5}},
        {"frog", SourceSet::cifar10, {6}},
        {"horse", SourceSet::cifar10, {7}},
        {"ship", SourceSet::cifar10, {8}},
        {"truck", SourceSet::cifar10, {9}},
        // aquarium_fish, flatfish, ray, shark, trout
        {"fish", SourceSet::cifar100, {1, 32, 67, 73, 91}, 1},
        // maple, oak, palm, pine, willow
        {"tree", SourceSet::cifar100, {47, 52, 56, 59, 96}, 17},
        // baby, boy, girl, man, woman
        {"person", SourceSet::cifar100, {2, 11, 35, 46, 98}, 14},
        // bee, beetle, butterfly, caterpillar, cockroach
        {"insect", SourceSet::cifar100, {6, 7, 14, 18, 24}, 7},
    };
    return classes;
}

const ClassSpec& find_class(std::string_view name)
{
    for (const auto& c : known_classes())
        if (c.name == name) return c;
    throw DataError("class '" + std::string(name) + "' is not available from CIFAR-10 or CIFAR-100");
}

const std::vector<std::string>& star_classes()
{
    static const std::vector<std::string> names = {"airplane", "automobile", "bird",  "cat",    "deer",
                                                   "frog",     "fish",       "tree",  "person", "insect"};
    return names;
}

SplitDataset build_cifar10_star(std::span<const LabeledImage> cifar10, std::span<const LabeledImage> cifar100,
                                const StarRequest& request, std::uint64_t seed)
{
    if (request.classes.size() < 2) throw DataError("dataset request needs at least two classes");
    if (request.per_class < 2 || request.train_per_class < 1 || request.train_per_class >= request.per_class)
        throw DataError("dataset request needs 0 < train_per_class < per_class");
    for (std::size_t i = 0; i < request.classes.size(); ++i)
        for (std::size_t j = 0; j < i; ++j)
            if (request.classes[i] == request.classes[j])
                throw DataError("class '" + request.classes[i] + "' requested twice");

    std::mt19937_64 rng(seed);
    SplitDataset out;
    out.manifest.classes = request.classes;
    out.manifest.per_class = request.per_class;
    out.manifest.grayscale = request.grayscale;
    out.manifest.seed = seed;

    for (std::size_t cls = 0; cls < request.classes.size(); ++cls) {
        const ClassSpec& spec = find_class(request.classes[cls]);
        const auto source = spec.source == SourceSet::cifar10 ? cifar10 : cifar100;
        const std::size_t parts = spec.labels.size();
        std::vector<const LabeledImage*> chosen;
        std::ostringstream composition;
        composition << (spec.source == SourceSet::cifar10 ? "cifar10" : "cifar100") << ":";
        for (std::size_t k = 0; k < parts; ++k) {
            const int want = request.per_class / int(parts) + (int(k) < request.per_class % int(parts) ? 1 : 0);
            std::vector<const LabeledImage*> pool;
            for (const auto& img : source)
                if (img.label == spec.labels[k]) pool.push_back(&img);
            if (int(pool.size()) < want)
                throw DataError("class '" + spec.name + "': source label " + std::to_string(spec.labels[k]) + " has " +
                                std::to_string(pool.size()) + " samples, need " + std::to_string(want));
            std::shuffle(pool.begin(), pool.end(), rng);
            chosen.insert(chosen.end(), pool.begin(), pool.begin() + want);
            composition << (k ? "+" : "") << spec.labels[k] << "x" << want;
        }
        std::shuffle(chosen.begin(), chosen.end(), rng);
        for (std::size_t i = 0; i < chosen.size(); ++i) {
            LabeledImage img = *chosen[i];
            img.label = int(cls);
            if (request.grayscale) img.image = to_grayscale(img.image);
            (int(i) < request.train_per_class ? out.train : out.test).push_back(std::move(img));
        }
        out.manifest.composition.push_back(composition.str());
        out.manifest.train_counts.push_back(request.train_per_class);
        out.manifest.test_counts.push_back(request.per_class - request.train_per_class);
    }
    return out;
}

std::string DatasetManifest::to_text() const
{
    std::ostringstream os;
    int train_total = 0, test_total = 0;
    for (int n : train_counts) train_total += n;
    for (int n : test_counts) test_total += n;
    os << "# patch-based classification dataset manifest\n";
    os << "format_version = " << kArchiveVersion << "\n";
    os << "seed = " << seed << "\n";
    os << "grayscale = " << (grayscale ? "true" : "false") << "\n";
    os << "per_class = " << per_class << "\n";
    os << "num_classes = " << classes.size() << "\n";
    os << "train_images = " << train_total << "\n";
    os << "test_images = " << test_total << "\n";
    for (std::size_t i = 0; i < classes.size(); ++i) {
        os << "\n[class." << i << "]\n";
        os << "name = " << classes[i] << "\n";
        os << "composition = " << composition[i] << "\n";
        os << "train = " << train_counts[i] << "\n";
        os << "test = " << test_counts[i] << "\n";
    }
    return os.str();
}

DatasetManifest DatasetManifest::parse(std::string_view text)
{
    std::map<std::string, std::string> kv;
    std::string section;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        if (line.front() == '[' && line.back() == ']') {
            section = line.substr(1, line.size() - 2) + ".";
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw DataError("manifest: malformed line '" + line + "'");
        kv[section + trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    auto get = [&](const std::string& key) {
        auto it = kv.find(key);
        if (it == kv.end()) throw DataError("manifest: missing key '" + key + "'");
        return it->second;
    };
    DatasetManifest m;
    try {
        m.seed = std::stoull(get("seed"));
        m.grayscale = get("grayscale") == "true";
        m.per_class = std::stoi(get("per_class"));
        const int n = std::stoi(get("num_classes"));
        for (int i = 0; i < n; ++i) {
            const std::string p = "class." + std::to_string(i) + ".";
            m.classes.push_back(get(p + "name"));
            m.composition.push_back(get(p + "composition"));
            m.train_counts.push_back(std::stoi(get(p + "train")));
            m.test_counts.push_back(std::stoi(get(p + "test")));
        }
    } catch (const std::logic_error& e) {
        throw DataError(std::string("manifest: bad value: ") + e.what());
    }
    return m;
}

std::vector<std::uint8_t> encode_archive(std::span<const LabeledImage> images)
{
    const int channels = images.empty() ? 1 : images.front().image.channels;
    ByteWriter w;
    w.raw({reinterpret_cast<const std::uint8_t*>(kArchiveMagic), sizeof kArchiveMagic});
    w.u32(kArchiveVersion);
    w.u32(std::uint32_t(channels));
    w.u32(kImageExtent);
    w.u32(kImageExtent);
    w.u64(images.size());
    for (const auto& img : images) {
        if (img.image.channels != channels || img.image.height != kImageExtent || img.image.width != kImageExtent)
            throw ShapeError("archive: all images must be 32x32 with the same channel count");
        if (img.label < 0 || img.label > 255) throw DataError("archive: label does not fit in a byte");
        w.u8(std::uint8_t(img.label));
        for (float p : img.image.pixels) w.u8(std::uint8_t(std::lround(std::clamp(p, 0.0f, 1.0f) * 255.0f)));
    }
    return std::move(w.bytes());
}

std::vector<LabeledImage> decode_archive(std::span<const std::uint8_t> bytes, const std::string& source)
{
    ByteReader r(bytes, source);
    const auto magic = r.take(sizeof kArchiveMagic);
    if (!std::equal(magic.begin(), magic.end(), kArchiveMagic)) throw DataError(source + ": not an image archive");
    const auto version = r.u32();
    if (version != kArchiveVersion)
        throw DataError(source + ": archive version " + std::to_string(version) + " unsupported");
    const int channels = int(r.u32());
    const auto h = r.u32(), w = r.u32();
    if ((channels != 1 && channels != 3) || h != kImageExtent || w != kImageExtent)
        throw DataError(source + ": unsupported image geometry");
    const auto count = r.u64();
    const std::size_t record = 1 + std::size_t(channels) * kPlane;
    if (r.remaining() != count * record)
        throw DataError(source + ": expected " + std::to_string(count) + " records, payload has " +
                        std::to_string(r.remaining()) + " bytes");
    std::vector<LabeledImage> out;
    out.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const int label = r.u8();
        out.push_back({decode_pixels(r.take(record - 1), channels), label, {source, std::uint32_t(i), label, -1}});
    }
    return out;
}

std::string provenance_csv(std::span<const LabeledImage> images, const std::string& split_name)
{
    std::ostringstream os;
    os << "split,position,label,source,index,original_label,coarse_label\n";
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto& p = images[i].provenance;
        os << split_name << ',' << i << ',' << images[i].label << ',' << p.source << ',' << p.index << ','
           << p.original_label << ',' << p.coarse_label << '\n';
    }
    return os.str();
}

} // namespace pbc
