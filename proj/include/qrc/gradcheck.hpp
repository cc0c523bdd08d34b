#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "qrc/tensor.hpp"

namespace qrc {

// Central-difference gradient of a pure scalar function, one coordinate at
// a time, computed in 64-bit. This is the independent oracle the autodiff
// implementation is checked against; it must never call backward().
inline Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f,
                                       const Tensor<double>& x, double eps = 1e-5) {
    Tensor<double> grad = Tensor<double>::zeros(x.shape);
    Tensor<double> probe = x;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        double orig = probe.data[i];
        probe.data[i] = orig + eps;
        double hi = f(probe);
        probe.data[i] = orig - eps;
        double lo = f(probe);
        probe.data[i] = orig;
        grad.data[i] = (hi - lo) / (2.0 * eps);
    }
    return grad;
}

// max_i |a_i - b_i| / max(1, |a_i|, |b_i|)
inline double max_rel_error(const Tensor<double>& a, const Tensor<double>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        double denom = std::max({1.0, std::abs(a.data[i]), std::abs(b.data[i])});
        worst = std::max(worst, std::abs(a.data[i] - b.data[i]) / denom);
    }
    return worst;
}

} // namespace qrc
