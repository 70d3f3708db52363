#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "apa/common.hpp"
#include "apa/tensor.hpp"

namespace apa {

template <typename T>
struct AdamState {
    std::vector<T> m;
    std::vector<T> v;
    long step = 0;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One bias-corrected Adam update for a single parameter tensor. The state's
// step counter is per-tensor; callers advance all tensors once per optimizer
// step so the counters agree.
template <typename T>
void adam_step(Tensor<T>& param, AdamState<T>& state, T lr, const AdamConfig& cfg, const std::string& name) {
    if (!param.has_grad())
        throw TrainingError("adam_step: parameter '" + name + "' has no gradient");
    if (state.m.empty()) {
        state.m.assign(param.size(), T(0));
        state.v.assign(param.size(), T(0));
    }
    if (state.m.size() != param.size())
        throw TrainingError("adam_step: state size " + std::to_string(state.m.size()) +
                            " does not match parameter '" + name + "' of " + std::to_string(param.size()));
    state.step += 1;
    const T b1 = T(cfg.beta1), b2 = T(cfg.beta2), eps = T(cfg.eps);
    const T bc1 = T(1) - std::pow(b1, T(state.step));
    const T bc2 = T(1) - std::pow(b2, T(state.step));
    const std::vector<T>& g = param.grad();
    for (std::size_t i = 0; i < param.size(); ++i) {
        if (!std::isfinite(static_cast<double>(g[i])))
            throw TrainingError("adam_step: non-finite gradient in parameter '" + name + "' at index " +
                                std::to_string(i));
        state.m[i] = b1 * state.m[i] + (T(1) - b1) * g[i];
        state.v[i] = b2 * state.v[i] + (T(1) - b2) * g[i] * g[i];
        const T mhat = state.m[i] / bc1;
        const T vhat = state.v[i] / bc2;
        param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

}  // namespace apa
