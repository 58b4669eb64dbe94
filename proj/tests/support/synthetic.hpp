#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "pbc/dataset.hpp"
#include "pbc/image.hpp"

namespace pbc::fixtures {

inline constexpr int kMotifExtent = 6;

// A fixed 6x6 two-level pattern pasted at a random position on a noisy
// mid-gray background. Classes differ only through their motif.
Image motif_image(int motif, std::mt19937_64& rng, int channels = 1);

// per_class images of each class 0..classes-1, labels interleaved.
std::vector<LabeledImage> synthetic_set(int classes, int per_class, std::uint64_t seed, int channels = 1);

// CIFAR-10/100 binary records built from motif images.
std::vector<std::uint8_t> cifar10_records(const std::vector<int>& labels, std::uint64_t seed);
std::vector<std::uint8_t> cifar100_records(const std::vector<int>& fine_labels, std::uint64_t seed);

// Writes root/cifar10/{data_batch_1.bin,test_batch.bin} with per_label10
// records per label (split between the two files), and root/cifar100/train.bin
// with per_fine100 records for each fine label of the four superclasses used
// by the star classes. Motifs are shared per named class.
void write_cifar_fixture(const std::filesystem::path& root, int per_label10, int per_fine100, std::uint64_t seed);

} // namespace pbc::fixtures
