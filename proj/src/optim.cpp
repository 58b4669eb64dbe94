#include "pbc/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace pbc {

AdamResult adam_update(std::span<ParamBlock> params, AdamState& state, long step, double lr, double l2,
                       const AdamOptions& options)
{
    if (step < 1) throw std::invalid_argument("adam_update: step must be >= 1");
    if (state.slots.empty()) {
        state.slots.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.slots[i].m.assign(params[i].values.size(), 0.0f);
            state.slots[i].v.assign(params[i].values.size(), 0.0f);
        }
    }
    if (state.slots.size() != params.size()) throw std::invalid_argument("adam_update: state/param block count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].grads.size() != params[i].values.size() || state.slots[i].m.size() != params[i].values.size())
            throw std::invalid_argument("adam_update: shape mismatch in block " + std::to_string(i));
        for (float g : params[i].grads) {
            if (!std::isfinite(g))
                return {false, "non-finite gradient in parameter block " + std::to_string(i)};
        }
    }

    const double correction1 = 1.0 - std::pow(options.beta1, double(step));
    const double correction2 = 1.0 - std::pow(options.beta2, double(step));
    const double b1 = options.beta1, b2 = options.beta2;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& block = params[i];
        auto& slot = state.slots[i];
        const double decay = block.decay ? 2.0 * l2 : 0.0;
        for (std::size_t j = 0; j < block.values.size(); ++j) {
            const double g = double(block.grads[j]) + decay * double(block.values[j]);
            slot.m[j] = float(b1 * slot.m[j] + (1.0 - b1) * g);
            slot.v[j] = float(b2 * slot.v[j] + (1.0 - b2) * g * g);
            const double m_hat = double(slot.m[j]) / correction1;
            const double v_hat = double(slot.v[j]) / correction2;
            block.values[j] -= float(lr * m_hat / (std::sqrt(v_hat) + options.epsilon));
        }
    }
    state.step = step;
    return {};
}

} // namespace pbc
