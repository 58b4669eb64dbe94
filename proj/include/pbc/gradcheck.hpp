#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pbc/layers.hpp"

namespace pbc {

using Fragment = std::vector<BasicLayer<double>>;

// Gradients of the probe objective sum(r * fragment(input)) for a fixed
// pseudo-random projection r.
struct FragmentGradients {
    BasicTensor<double> input;
    std::vector<LayerGrads<double>> layers;
};

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::string worst; // which entry produced the maximum
    std::size_t checked = 0;
    bool passed = false;
};

// Hook applied to the analytic gradients before comparison (negative controls).
using GradientTamper = std::function<void(FragmentGradients&)>;

inline constexpr std::size_t kMaxCheckedParameters = 10000;

FragmentGradients analytic_gradients(const Fragment& fragment, const BasicTensor<double>& input, Mode mode,
                                     std::uint64_t seed = 1);

// Compares analytic gradients with central differences for every input and
// parameter entry. Relative error per entry is |a - n| / max(|a|, |n|, 1e-6).
GradCheckReport finite_difference_check(const Fragment& fragment, const BasicTensor<double>& input, Mode mode,
                                        double tolerance, double step = 1e-5, std::uint64_t seed = 1,
                                        const GradientTamper& tamper = {});

} // namespace pbc
