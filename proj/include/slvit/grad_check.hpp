#pragma once

// Central-difference gradient verification for float64 graphs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "slvit/param_set.hpp"

namespace slvit {

inline constexpr double kGradCheckStep = 1e-5;
// Central differences of an O(1) loss carry ~1e-11 of rounding noise, so
// gradients smaller than this are compared on an absolute scale instead.
inline constexpr double kGradCheckFloor = 1e-6;

inline double relative_gap(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(kGradCheckFloor, std::abs(analytic) + std::abs(numeric));
}

// Max over elements of |a - n| / max(1e-8, |a| + |n|) for d fn / d x.
inline double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& fn,
                         const Tensor<double>& x) {
    Tensor<double> probe = x.clone();
    probe.set_requires_grad(true);
    Tensor<double> y = fn(probe);
    y.backward();
    std::vector<double> analytic(probe.size(), 0.0);
    if (probe.has_grad()) std::copy(probe.grad().begin(), probe.grad().end(), analytic.begin());

    double worst = 0.0;
    NoGradGuard guard;
    Tensor<double> moved = x.clone();
    for (std::size_t i = 0; i < moved.size(); ++i) {
        const double orig = moved[i];
        moved[i] = orig + kGradCheckStep;
        const double up = fn(moved).item();
        moved[i] = orig - kGradCheckStep;
        const double down = fn(moved).item();
        moved[i] = orig;
        worst = std::max(worst, relative_gap(analytic[i], (up - down) / (2 * kGradCheckStep)));
    }
    return worst;
}

// Same check against every trainable, non-buffer entry of `params`; `loss`
// recomputes the scalar from the current parameter values.
inline double grad_check_params(const std::function<Tensor<double>()>& loss,
                                ParamSet<double>& params) {
    params.zero_grad();
    params.prepare_for_training();
    loss().backward();
    double worst = 0.0;
    std::map<std::string, std::vector<double>> analytic;
    for (auto& [path, e] : params.entries()) {
        if (!e.trainable || e.buffer) continue;
        std::vector<double> g(e.value.size(), 0.0);
        if (e.value.has_grad()) std::copy(e.value.grad().begin(), e.value.grad().end(), g.begin());
        analytic.emplace(path, std::move(g));
    }
    params.release_grad();
    params.zero_grad();
    NoGradGuard guard;
    for (auto& [path, g] : analytic) {
        Tensor<double>& p = params.at(path);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double orig = p[i];
            p[i] = orig + kGradCheckStep;
            const double up = loss().item();
            p[i] = orig - kGradCheckStep;
            const double down = loss().item();
            p[i] = orig;
            worst = std::max(worst, relative_gap(g[i], (up - down) / (2 * kGradCheckStep)));
        }
    }
    return worst;
}

}  // namespace slvit
