#pragma once

#include <cmath>
#include <map>
#include <string>

#include "qrc/params.hpp"

namespace qrc {

// Bias-corrected Adam. Moments are keyed by parameter name and created
// lazily with the parameter's shape; t counts completed steps.
template <typename T>
struct AdamState {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long t = 0;
    std::map<std::string, Tensor<T>> m;
    std::map<std::string, Tensor<T>> v;
};

template <typename T>
void adam_step(ParamStore<T>& params, const GradMap<T>& grads, AdamState<T>& state) {
    if (grads.empty()) return;
    state.t += 1;
    double bc1 = 1.0 - std::pow(state.beta1, state.t);
    double bc2 = 1.0 - std::pow(state.beta2, state.t);
    for (const auto& [name, g] : grads) {
        Tensor<T>& p = params[name];
        if (!p.same_shape(g)) throw DimensionError("adam gradient shape mismatch for " + name);
        auto& m = state.m.try_emplace(name, Tensor<T>::zeros(p.shape)).first->second;
        auto& v = state.v.try_emplace(name, Tensor<T>::zeros(p.shape)).first->second;
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            double gi = g.data[i];
            double mi = state.beta1 * m.data[i] + (1.0 - state.beta1) * gi;
            double vi = state.beta2 * v.data[i] + (1.0 - state.beta2) * gi * gi;
            m.data[i] = static_cast<T>(mi);
            v.data[i] = static_cast<T>(vi);
            double mhat = mi / bc1;
            double vhat = vi / bc2;
            p.data[i] = static_cast<T>(p.data[i] - state.lr * mhat / (std::sqrt(vhat) + state.eps));
        }
    }
}

// Global-norm gradient clipping over one gradient map. Returns the norm
// before clipping.
template <typename T>
double clip_global_norm(GradMap<T>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, g] : grads)
        for (T v : g.data) sq += static_cast<double>(v) * static_cast<double>(v);
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        double s = max_norm / norm;
        for (auto& [name, g] : grads)
            for (auto& v : g.data) v = static_cast<T>(v * s);
    }
    return norm;
}

} // namespace qrc
