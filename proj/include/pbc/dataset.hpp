#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pbc/image.hpp"

namespace pbc {

inline constexpr std::size_t kCifar10RecordBytes = 3073;  // label + 3x1024 planar pixels
inline constexpr std::size_t kCifar100RecordBytes = 3074; // coarse + fine + 3x1024 pixels
inline constexpr std::uint32_t kArchiveVersion = 1;

struct Provenance {
    std::string source;      // e.g. "cifar10:data_batch_1.bin"
    std::uint32_t index = 0; // record index within the source
    int original_label = -1; // CIFAR-10 label or CIFAR-100 fine label
    int coarse_label = -1;   // CIFAR-100 superclass, -1 otherwise

    friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct LabeledImage {
    Image image;
    int label = 0;
    Provenance provenance;
};

std::vector<LabeledImage> parse_cifar10(std::span<const std::uint8_t> bytes, const std::string& source = "cifar10");
std::vector<LabeledImage> parse_cifar100(std::span<const std::uint8_t> bytes, const std::string& source = "cifar100");

// data_batch_{1..5}.bin and test_batch.bin (whichever exist, at least one).
std::vector<LabeledImage> load_cifar10_dir(const std::filesystem::path& dir);
// train.bin and test.bin (whichever exist, at least one).
std::vector<LabeledImage> load_cifar100_dir(const std::filesystem::path& dir);

// ITU-R BT.601 luma: 0.299 R + 0.587 G + 0.114 B.
Image to_grayscale(const Image& image);

enum class SourceSet { cifar10, cifar100 };

// A named class and the source labels that realize it. The CIFAR-100-based
// classes are the union of one superclass's five fine labels.
struct ClassSpec {
    std::string name;
    SourceSet source;
    std::vector<int> labels;
    int coarse_label = -1;
};

const std::vector<ClassSpec>& known_classes();
// Throws DataError when the name is not realizable from either source.
const ClassSpec& find_class(std::string_view name);
// airplane, automobile, bird, cat, deer, frog, fish, tree, person, insect
const std::vector<std::string>& star_classes();

struct StarRequest {
    std::vector<std::string> classes = star_classes();
    int per_class = 3000;
    int train_per_class = 2500;
    bool grayscale = true;
};

struct DatasetManifest {
    std::vector<std::string> classes;
    std::vector<std::string> composition; // per class: source and labels
    std::vector<int> train_counts;
    std::vector<int> test_counts;
    int per_class = 0;
    bool grayscale = true;
    std::uint64_t seed = 0;

    std::string to_text() const;
    static DatasetManifest parse(std::string_view text);
    friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

struct SplitDataset {
    std::vector<LabeledImage> train;
    std::vector<LabeledImage> test;
    DatasetManifest manifest;
};

// Seeded per-class sampling, relabeling to request order, and a balanced
// train/test split. CIFAR-100-based classes draw evenly from their fine labels.
SplitDataset build_cifar10_star(std::span<const LabeledImage> cifar10, std::span<const LabeledImage> cifar100,
                                const StarRequest& request, std::uint64_t seed);

// Packed archive: versioned header, then 1 label byte + C*1024 pixel bytes per
// record. Pixels are quantized to round(255 p).
std::vector<std::uint8_t> encode_archive(std::span<const LabeledImage> images);
std::vector<LabeledImage> decode_archive(std::span<const std::uint8_t> bytes, const std::string& source = "archive");

std::string provenance_csv(std::span<const LabeledImage> images, const std::string& split);

} // namespace pbc
