#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace pbc {

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// First and second moments for one parameter block.
struct AdamSlot {
    std::vector<float> m;
    std::vector<float> v;
};

// One parameter block handed to the optimizer. Ridge decay applies only
// where `decay` is set (convolution weights, not normalization scale/shift).
struct ParamBlock {
    std::span<float> values;
    std::span<const float> grads;
    bool decay = true;
};

struct AdamState {
    std::vector<AdamSlot> slots;
    long step = 0;
};

struct AdamResult {
    bool applied = true;
    std::string reason; // set when the update was rejected
};

// Bias-corrected Adam. The effective gradient is g + 2*l2*w on decayed
// blocks. Any non-finite gradient rejects the whole step, leaving params and
// state untouched. `step` is the 1-based step number of this update.
AdamResult adam_update(std::span<ParamBlock> params, AdamState& state, long step, double lr, double l2,
                       const AdamOptions& options = {});

} // namespace pbc
