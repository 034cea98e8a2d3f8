#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "slvit/param_set.hpp"

namespace slvit {

class MissingGradientError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Counts epochs without improvement of a monitored metric.
struct PatienceTracker {
    bool higher_is_better = false;
    int patience = 0;
    double best = std::numeric_limits<double>::quiet_NaN();
    int since_improvement = 0;

    // Returns true when `metric` is a new best.
    bool update(double metric) {
        const bool improved = std::isnan(best) || (higher_is_better ? metric > best : metric < best);
        if (improved) {
            best = metric;
            since_improvement = 0;
        } else {
            ++since_improvement;
        }
        return improved;
    }

    bool exhausted() const { return since_improvement >= patience; }
};

template <typename T>
struct OptimizerState {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t step_count = 0;
    std::map<std::string, std::vector<T>> first_moment;
    std::map<std::string, std::vector<T>> second_moment;

    double plateau_factor = 0.6;
    PatienceTracker plateau;
    PatienceTracker stop;

    // Multiplies the learning rate by the plateau factor once the plateau
    // tracker has run out of patience. Returns true if the rate was reduced.
    bool on_epoch_metric(double metric) {
        stop.update(metric);
        plateau.update(metric);
        if (plateau.exhausted()) {
            learning_rate *= plateau_factor;
            plateau.since_improvement = 0;
            return true;
        }
        return false;
    }

    bool should_stop() const { return stop.exhausted(); }
};

// One bias-corrected Adam update over the trainable entries of `params`.
template <typename T>
void adam_step(ParamSet<T>& params, OptimizerState<T>& state) {
    for (auto& [path, e] : params.entries()) {
        if (e.trainable && !e.buffer && !e.value.has_grad()) {
            throw MissingGradientError("adam_step: no gradient for trainable parameter '" + path +
                                       "'");
        }
    }
    ++state.step_count;
    const double t = static_cast<double>(state.step_count);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (auto& [path, e] : params.entries()) {
        if (!e.trainable || e.buffer) continue;
        auto value = e.value.data();
        auto grad = e.value.grad();
        auto& m = state.first_moment[path];
        auto& v = state.second_moment[path];
        if (m.empty()) {
            m.assign(value.size(), T(0));
            v.assign(value.size(), T(0));
        }
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double g = grad[i];
            m[i] = static_cast<T>(state.beta1 * m[i] + (1.0 - state.beta1) * g);
            v[i] = static_cast<T>(state.beta2 * v[i] + (1.0 - state.beta2) * g * g);
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            value[i] = static_cast<T>(value[i] -
                                      state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon));
        }
    }
}

}  // namespace slvit
