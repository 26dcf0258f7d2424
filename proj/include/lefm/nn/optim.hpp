#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "lefm/error.hpp"
#include "lefm/nn/tensor.hpp"

namespace lefm::nn {

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <std::floating_point T>
struct AdamState {
    std::int64_t step = 0;
    AdamHyper hyper;
    std::vector<std::vector<T>> first_moment;
    std::vector<std::vector<T>> second_moment;
};

/// One Adam update over parallel lists of parameter and gradient buffers.
/// L2 weight decay is folded into the gradient (g + decay * theta) before the
/// moment updates. Moments are created lazily on the first call.
template <std::floating_point T>
void adam_step(std::span<const std::span<T>> params, std::span<const std::span<const T>> grads, AdamState<T>& state,
               double lr, double weight_decay)
{
    if (!(lr > 0))
        throw ConfigError("adam_step: learning rate must be positive");
    if (params.size() != grads.size())
        throw ShapeError("adam_step: parameter and gradient lists differ in length");
    if (state.first_moment.empty()) {
        for (const auto& p : params) {
            state.first_moment.emplace_back(p.size(), T(0));
            state.second_moment.emplace_back(p.size(), T(0));
        }
    }
    if (state.first_moment.size() != params.size())
        throw ShapeError("adam_step: optimizer state tracks a different parameter list");
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (params[k].size() != grads[k].size() || state.first_moment[k].size() != params[k].size())
            throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(k));
        for (T g : grads[k])
            if (!std::isfinite(g))
                throw NumericError("adam_step: non-finite gradient for parameter " + std::to_string(k));
    }

    ++state.step;
    const auto& h = state.hyper;
    const double bc1 = 1 - std::pow(h.beta1, static_cast<double>(state.step));
    const double bc2 = 1 - std::pow(h.beta2, static_cast<double>(state.step));
    const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
    const T wd = static_cast<T>(weight_decay);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1 / std::sqrt(bc2));
    const T eps = static_cast<T>(h.epsilon);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto theta = params[k];
        auto grad = grads[k];
        auto& m = state.first_moment[k];
        auto& v = state.second_moment[k];
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const T g = grad[i] + wd * theta[i];
            m[i] = b1 * m[i] + (T(1) - b1) * g;
            v[i] = b2 * v[i] + (T(1) - b2) * g * g;
            theta[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
        }
    }
}

/// Convenience overload stepping tensors with their accumulated gradients.
template <std::floating_point T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, double lr, double weight_decay)
{
    std::vector<std::span<T>> values;
    std::vector<std::span<const T>> grads;
    for (auto& p : params) {
        p.ensure_grad();
        values.push_back(p.values());
        grads.push_back(p.grad());
    }
    adam_step<T>(values, grads, state, lr, weight_decay);
}

struct PlateauConfig {
    int patience = 20;
    double factor = 0.5;
    double min_lr = 1e-6;
};

/// Epochs since the best-so-far loss last strictly decreased.
inline int epochs_since_improvement(std::span<const double> history)
{
    double best = std::numeric_limits<double>::infinity();
    int since = 0;
    for (double loss : history) {
        if (loss < best) {
            best = loss;
            since = 0;
        } else {
            ++since;
        }
    }
    return since;
}

/// Learning rate after the latest epoch: every `patience` consecutive epochs
/// without strict improvement halve it (by `factor`), floored at `min_lr`.
inline double plateau_scheduler(std::span<const double> history, double current_lr, const PlateauConfig& cfg = {})
{
    const int since = epochs_since_improvement(history);
    if (since > 0 && since % cfg.patience == 0)
        return std::max(current_lr * cfg.factor, cfg.min_lr);
    return current_lr;
}

} // namespace lefm::nn
