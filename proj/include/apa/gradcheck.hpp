#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <type_traits>
#include <vector>

#include "apa/common.hpp"
#include "apa/tensor.hpp"

namespace apa {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    std::string worst_tensor;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
    bool pass = false;
};

// Central-difference audit of analytic gradients. `forward` must rebuild the
// graph on the given tape and return the scalar loss; it is re-run twice per
// checked coordinate. `coords` empty means every coordinate of every tensor.
template <typename T>
GradCheckResult finite_difference_check(
    const std::function<Tensor<T>(Tape<T>&)>& forward,
    std::vector<std::pair<std::string, Tensor<T>>> params,
    double tolerance,
    const std::vector<std::pair<std::size_t, std::size_t>>& coords = {}) {
    constexpr double kStep = std::is_same_v<T, double> ? 1e-5 : 1e-2;
    constexpr double kFloor = std::is_same_v<T, double> ? 1e-2 : 1.0;

    Tape<T> tape;
    Tensor<T> loss = forward(tape);
    tape.backward(loss);
    std::vector<std::vector<T>> analytic;
    analytic.reserve(params.size());
    for (auto& [name, p] : params) {
        if (!p.has_grad())
            throw ContractError("finite_difference_check: '" + name + "' received no gradient");
        analytic.push_back(p.grad());
    }

    GradCheckResult res;
    auto check_coord = [&](std::size_t pi, std::size_t ci) {
        Tensor<T>& p = params[pi].second;
        const T saved = p[ci];
        const T h = T(kStep * std::max(1.0, std::abs(static_cast<double>(saved))));
        p[ci] = saved + h;
        Tape<T> t1;
        const double up = static_cast<double>(forward(t1).item());
        p[ci] = saved - h;
        Tape<T> t2;
        const double down = static_cast<double>(forward(t2).item());
        p[ci] = saved;
        const double numeric = (up - down) / (2.0 * static_cast<double>(h));
        const double a = static_cast<double>(analytic[pi][ci]);
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kFloor});
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst_index = ci;
            res.worst_tensor = params[pi].first;
            res.analytic_at_worst = a;
            res.numeric_at_worst = numeric;
        }
    };

    if (coords.empty()) {
        for (std::size_t pi = 0; pi < params.size(); ++pi)
            for (std::size_t ci = 0; ci < params[pi].second.size(); ++ci) check_coord(pi, ci);
    } else {
        for (auto [pi, ci] : coords) check_coord(pi, ci);
    }
    res.pass = res.max_rel_err <= tolerance;
    return res;
}

}  // namespace apa
